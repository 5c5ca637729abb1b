//! Error types shared across the simulator.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid run configuration; `field` is the dotted path of the offending key.
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Matrix / parameter shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A client upload was missing, duplicated or unknown.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// IDX container carried the wrong magic number.
    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxBadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// IDX container ended before the declared payload.
    #[error("truncated IDX file {path}: {detail}")]
    IdxTruncated { path: String, detail: String },

    /// Image and label files disagree on the sample count.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// A partition request cannot be satisfied by the available pool.
    #[error("split error: {0}")]
    Split(String),

    /// Checkpoint container is malformed or from an incompatible version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty test set")]
    EmptyTestSet,

    /// Internal invariant violation (a bug, not a user error).
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
