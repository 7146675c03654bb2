use std::io;

use thiserror::Error;

pub type Result<T, E = MtdError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MtdError {
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: expected {expected} bytes, found {found}")]
    Length { expected: usize, found: usize },
    #[error("bounds error: {0}")]
    Bounds(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("packing error: placed {achieved} of {requested} copies")]
    Packing { requested: usize, achieved: usize },
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// The iterate became non-finite. `last_finite` holds the last finite iterate
    /// (row-major, `side`×`side`).
    #[error("iterate diverged at step {iteration}")]
    Divergence {
        iteration: usize,
        side: usize,
        last_finite: Vec<f64>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MtdError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MtdError::Shape(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        MtdError::Format(msg.into())
    }
}
