use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("leaf node {node} ({name}) is not bound")]
    Unbound { node: usize, name: String },
    #[error("backward seed node {node} is not scalar (shape {shape:?})")]
    NonScalarSeed { node: usize, shape: Vec<usize> },
    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("unknown token {0:?}")]
    UnknownTokenName(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("training diverged at {0}")]
    Diverged(String),
    #[error("tensor name mismatch: {0}")]
    Names(String),
    #[error("unsupported norm order {0}")]
    UnsupportedNorm(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
