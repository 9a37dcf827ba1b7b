//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input is structurally valid but degenerate (all-zero pupil, kernel
    /// wider than the image, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A requested frequency lies beyond the sampled band.
    #[error("out of band: {0}")]
    OutOfBand(String),

    /// A metric is undefined for the given population (empty bins,
    /// constant series, zero denominator).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Too few samples for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// No optimizer start converged.
    #[error("fit failure: {0}")]
    FitFailure(String),

    /// Training produced a non-finite loss or lost too many members.
    #[error("training aborted: {0}")]
    TrainingAborted(String),

    /// Malformed binary file; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
