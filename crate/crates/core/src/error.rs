use std::path::PathBuf;

use ppd_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated in {op}: {msg}")]
    Contract { op: &'static str, msg: String },
    #[error("degenerate depth map: {0}")]
    DegenerateDepth(String),
    #[error("affine alignment failed: {0}")]
    Alignment(String),
    #[error("non-finite {what} at step {step} (batch ids: {ids})")]
    NonFinite { what: &'static str, step: u64, ids: String },
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CoreError {
    pub(crate) fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        CoreError::Contract { op, msg: msg.into() }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CoreError::Format { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.into(), source }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
