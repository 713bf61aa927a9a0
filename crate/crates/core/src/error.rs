use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown token id {0}")]
    UnknownToken(usize),

    #[error("unknown tag {0}")]
    UnknownTag(String),

    #[error("label {0} outside {{0,1}}")]
    InvalidLabel(u8),

    #[error("gold item {0} missing from its own contrast set")]
    GoldNotInSet(usize),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dangling image reference {0}")]
    DanglingImage(String),

    #[error("infeasible corpus spec: {0}")]
    Infeasible(String),

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
