//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by trajectory construction, solving, planning and I/O.
#[derive(Error, Debug)]
pub enum CoreError {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A linear solve or factorization broke down.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    /// A sampled time or index fell outside the valid domain.
    #[error("out of range: {0}")]
    OutOfRange(String),
    /// Every planning candidate failed; the caller should keep its previous plan.
    #[error("planning failure: {0}")]
    PlanningFailure(String),
    /// A file could not be read, written or parsed.
    #[error("io error: {0}")]
    Io(String),
    /// A file declared a format version this build does not understand.
    #[error("unsupported format version {found} (supported: {supported}) in {what}")]
    FormatVersion {
        what: String,
        found: u32,
        supported: u32,
    },
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
