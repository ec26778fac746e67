//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate feature: raw encoder output norm {norm:e} is below {min:e}")]
    DegenerateFeature { norm: f64, min: f64 },

    #[error("invalid temperature: tau must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("divergence{location}: non-finite loss at stage {stage}, step {step}")]
    Divergence {
        stage: usize,
        step: usize,
        location: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncation(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("unknown label {0}")]
    UnknownLabel(u32),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
