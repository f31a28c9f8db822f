use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid id: {0}")]
    Id(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Checkpoint(_) => 3,
            Error::Constraint(_) => 4,
            _ => 2,
        }
    }
}
