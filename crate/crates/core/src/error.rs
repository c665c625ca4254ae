use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("degenerate batch in {op}: batch statistics need at least 2 rows, got {batch}")]
    DegenerateBatch { op: &'static str, batch: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("insufficient data: {0}")]
    Capacity(String),

    #[error("contract violation: real query set read while fine-tuning")]
    QueryAccess,

    #[error("cannot load {}: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("bad snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by input data rather than by the caller.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Capacity(_) | Error::Load { .. } | Error::Snapshot(_) | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
