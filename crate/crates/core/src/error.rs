use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the distillation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },
    #[error("index {index} out of range (< {bound}) in {context}")]
    Index {
        context: String,
        index: usize,
        bound: usize,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("gradient check failed at coordinate {coordinate}: {reason}")]
    GradCheck { coordinate: usize, reason: String },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unknown item id {item} referenced by {context}")]
    Referential { item: u64, context: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("estimator error: {0}")]
    Estimator(String),
    #[error("missing upstream stage `{stage}`: {detail}")]
    State { stage: String, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
