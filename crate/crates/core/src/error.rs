use thiserror::Error;

/// Errors raised by the training, aggregation and storage layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: expected length {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("non-finite value at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("split infeasible: label {label} has {available} samples, need {required}")]
    Split {
        label: usize,
        available: usize,
        required: usize,
    },

    #[error("aggregation precondition failed: {0}")]
    Aggregation(String),

    #[error("staleness inversion: new version {new_version} is not newer than used version {used_version}")]
    StalenessInversion { new_version: u64, used_version: u64 },

    #[error("round incomplete: have {have} of {need} workers")]
    RoundIncomplete { have: usize, need: usize },

    #[error("storage: {0}")]
    Storage(String),

    #[error("object not found: {bucket}/{path}")]
    NotFound { bucket: String, path: String },

    #[error("model format: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
