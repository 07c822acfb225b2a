use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor or feature-map shape violates an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value (odd/even constraints, ranges, unknown keys).
    #[error("config error: {0}")]
    Config(String),

    /// Input data failed validation (non-binary mask, bad value range, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Dataset loading problems (missing dirs, unmatched stems, empty set).
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint format/version/architecture mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted on a non-finite loss.
    #[error("non-finite loss at step {step} (batch ids: {batch_ids:?})")]
    NonFinite { step: usize, batch_ids: Vec<String> },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
