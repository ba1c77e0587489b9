use std::path::PathBuf;

use thiserror::Error;

/// Operand shapes that do not fit together.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{op}: shape mismatch: {detail}")]
pub struct ShapeError {
    pub op: String,
    pub detail: String,
}

impl ShapeError {
    pub fn new(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Self { op: op.into(), detail: detail.into() }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    Version { found: String, expected: String },
    #[error("checkpoint shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed dataset at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("dataset header declares N={declared} but scenario {id} has {found} rows")]
    HorizonMismatch { declared: usize, id: u64, found: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid { what: what.into(), message: message.into() }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 2 user/config error, 3 IO error, 4 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
