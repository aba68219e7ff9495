//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape contract violation on a tensor primitive or layer.
    #[error("{op}: shape mismatch: {msg}")]
    Shape { op: &'static str, msg: String },

    /// A forward or backward pass produced a NaN or infinite value.
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    /// Invalid configuration value or incompatible configs.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset, manifest or label-assignment problem.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure outside plain NaN propagation (gradient check
    /// failure, undefined metric, NaN loss).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint container is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}
