use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("target of length {target_len} is infeasible for {frames} frames (needs at least {required})")]
    InfeasibleTarget {
        target_len: usize,
        frames: usize,
        required: usize,
    },

    #[error("enumeration budget exceeded: {0}")]
    BudgetExceeded(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("non-finite gradient in `{0}`")]
    NonFiniteGradient(String),

    #[error("record {index} ({path}) is unusable: {reason}")]
    BadRecord {
        index: usize,
        path: PathBuf,
        reason: String,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
