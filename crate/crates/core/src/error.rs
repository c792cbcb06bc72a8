use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or model contract was violated (shape mismatch, wrong rank, empty set).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A numeric op was applied outside its domain (for example `log` of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// Backward was requested on a value that does not belong to the tape.
    #[error("loss is detached from the tape")]
    Detached,

    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary input. `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// Non-finite values or other numerical failures during training.
    #[error("training failed at step {step}: {msg}")]
    Training { step: u64, msg: String },

    #[error("audit refused: {0}")]
    Audit(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
