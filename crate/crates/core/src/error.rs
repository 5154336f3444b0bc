use thiserror::Error;

/// Errors raised anywhere in the recovery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate timestamp {0} appears in both observed and query sets")]
    DuplicateTime(f64),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("autodiff: {0}")]
    Autodiff(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::DuplicateTime(_) => "duplicate_time",
            Error::NonFinite(_) => "non_finite",
            Error::Degenerate(_) => "degenerate",
            Error::Autodiff(_) => "autodiff",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
