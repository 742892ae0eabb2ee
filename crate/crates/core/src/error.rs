use thiserror::Error;

/// Errors raised by the numeric, loss, training and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("triplet batch has no negative: all samples share one class")]
    NoNegative,

    #[error("triplet batch has no valid anchor: every class is a singleton")]
    NoValidAnchor,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step} (epoch {epoch}): {detail}")]
    Diverged { step: u64, epoch: usize, detail: String },

    #[error("no valid gallery entries remain after exclusion")]
    NoValidGallery,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
