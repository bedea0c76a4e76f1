use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("EDF error at byte {offset}: {message}")]
    Edf { offset: usize, message: String },

    #[error("hypnogram error: {0}")]
    Hypnogram(String),

    #[error("missing channel `{0}`")]
    MissingChannel(String),

    #[error("sample rate mismatch: {0}")]
    RateMismatch(String),

    #[error("segmentation error: {0}")]
    Segmentation(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: usize, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn edf(offset: usize, message: impl Into<String>) -> Self {
        Error::Edf {
            offset,
            message: message.into(),
        }
    }
}
