use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("dangling input `{input}` on node `{node}`")]
    DanglingInput { node: String, input: String },

    #[error("cycle detected through node `{0}`")]
    Cycle(String),

    #[error("weight `{key}` has {actual} elements, expected {expected}")]
    WeightSize {
        key: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape error at `{node}`: {reason}")]
    Shape { node: String, reason: String },

    #[error("node `{node}` produced a non-finite value")]
    NonFinite { node: String },

    #[error("cannot remove producer channels for `{consumer}`: {reason}")]
    ProducerNotRemovable { consumer: String, reason: String },

    #[error("unsupported operation on `{node}`: {reason}")]
    Unsupported { node: String, reason: String },

    #[error("invalid channel indices: {0}")]
    BadIndices(String),

    #[error("budget {budget} out of range 1..={channels}")]
    BudgetOutOfRange { budget: usize, channels: usize },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("target speed-up {target} unreachable (best achievable {best:.4})")]
    UnreachableTarget { target: f64, best: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
