use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TsnetError>;

#[derive(Debug, Error)]
pub enum TsnetError {
    /// Operand shapes disagree; `context` names the layer or op involved.
    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared while evaluating a graph node.
    #[error("non-finite value at node {node} ({op}) during {phase}")]
    Numeric {
        node: usize,
        op: &'static str,
        phase: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': {detail}")]
    Parse {
        row: usize,
        column: String,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    /// Training produced a non-finite loss. `last_good` holds the best
    /// parameters seen before the failure.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
        last_good: Box<crate::training::TsnetModel>,
    },
}

impl TsnetError {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        TsnetError::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TsnetError::Io {
            path: path.into(),
            source,
        }
    }
}
