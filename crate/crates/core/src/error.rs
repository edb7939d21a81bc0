use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input of {len} tokens exceeds the context window of {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("invalid intervention: {0}")]
    Intervention(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("task construction failed: {0}")]
    Task(String),

    #[error("unsupported schema version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("bridge error [{code}]: {message}")]
    Bridge { code: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
