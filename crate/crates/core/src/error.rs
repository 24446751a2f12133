use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("interaction references unknown item `{0}`")]
    DanglingItem(String),

    #[error("duplicate item `{0}`")]
    DuplicateItem(String),

    #[error("item `{0}` is missing")]
    MissingItem(String),

    #[error("unknown item `{0}`")]
    UnknownItem(String),

    #[error("unknown user `{0}`")]
    UnknownUser(String),

    #[error("user `{0}` has no training history (cold user)")]
    ColdUser(String),

    #[error("non-finite value for item `{item_id}` at position {position}")]
    NonFinite { item_id: String, position: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing upstream stage `{stage}`: {detail}")]
    Dependency { stage: String, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dependency { .. } => 4,
            Error::Io { .. } => 5,
            Error::ColdUser(_) | Error::UnknownUser(_) => 6,
            _ => 3,
        }
    }
}
