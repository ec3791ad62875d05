use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("unknown graph name `{0}`")]
    UnknownName(String),

    #[error("gradient check requires a scalar output, `{name}` has shape {shape:?}")]
    NonScalarOutput { name: String, shape: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("missing input artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("non-finite loss in {stage} at batch {batch}")]
    NonFinite { stage: &'static str, batch: usize },

    #[error("degenerate training run: {0}")]
    Degenerate(String),

    #[error("malformed artifact {}: {reason}", .path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
