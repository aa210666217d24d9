use thiserror::Error;

/// Toolkit-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called outside its documented contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (bad site spec, out-of-range hyperparameter, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or out-of-range input data.
    #[error("input error: {0}")]
    Input(String),

    /// Numerical failure (divergence, non-finite values, failed tolerance).
    #[error("numerical failure: {0}")]
    Numerics(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Corrupt, truncated or incompatible on-disk artifact.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
