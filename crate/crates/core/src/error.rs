use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes disagree; `node` is the graph position of the offending op.
    #[error("shape error at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    /// API used out of order (backward before forward, merging twice, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input is well-formed but numerically degenerate (zero variance, zero norm, NaN loss).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error at index {index}: value {value} is not positive")]
    Domain { index: usize, value: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(node: usize, op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node,
            op,
            detail: detail.into(),
        }
    }
}
