use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent hyperparameters or tensor shapes that cannot be combined.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller supplied an argument outside the operation's contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data violates a value-level contract (range, binarity).
    #[error("validation error: {0}")]
    Validation(String),
    /// NaN or infinity produced by an operation.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("training error: {0}")]
    Training(String),
    /// Invariant broken between two internal components.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
