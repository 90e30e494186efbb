//! Deterministic tensor engine with reverse-mode automatic differentiation.

mod adam;
mod element;
mod gradcheck;
mod graph;
pub mod init;
pub mod rearrange;
mod store;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use element::Element;
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GRAD_FLOOR};
pub use graph::{Activation, Gradients, Graph, Var};
pub use store::{Bound, ParameterStore};
pub use tensor::{strides_of, Tensor};
