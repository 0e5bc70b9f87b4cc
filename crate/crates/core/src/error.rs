use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("invalid hierarchy ({rule}): {message}")]
    Validation { rule: &'static str, message: String },

    #[error("audit error: {0}")]
    Audit(String),

    #[error("bad checkpoint header")]
    BadCheckpointHeader,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite value in `{path}` at step {step}")]
    NonFinite { path: String, step: u64 },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
