//! Crate-wide error type.

use std::path::PathBuf;

/// All fallible operations in the crate return this.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Format(String),

    /// Bitstream or payload failed structural validation (bad magic, short
    /// read, checksum mismatch, impossible field value).
    #[error("corrupt stream: {0}")]
    Corrupt(String),

    /// Shapes or sizes that do not line up (caller bug, not data corruption).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Checkpoint incompatible with the model that tries to load it.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
