//! LVNet: a hybrid convolution + video shifted-window transformer for
//! multi-frame infrared small target detection, with the data generation,
//! metrics and training tooling around it.

pub mod conv_frontend;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod trainer;
pub mod vst;

pub use error::{Error, Result};
