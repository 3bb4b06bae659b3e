use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or unsupported file content.
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Raw payload shorter or longer than the header promises.
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    /// Incompatible tensor/array shapes.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// API misuse (violated precondition).
    #[error("usage error: {0}")]
    Usage(String),

    /// Two label sets that should cover the same (volume, slice) keys do not.
    #[error("pairing error: {0}")]
    Pairing(String),

    /// A metric that has no defined value for the given inputs.
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    /// Invalid experiment or generator configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage was invoked before its inputs exist.
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    /// NaN or infinity detected during training or inference.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
