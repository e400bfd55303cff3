use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss is not connected to any parameter requiring gradients")]
    DetachedLoss,

    #[error("PAM affinity over {positions} positions exceeds the cap of {cap}")]
    AffinityCap { positions: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("NIfTI format error: {0}")]
    Nifti(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("checkpoint parameter `{name}` mismatch: {detail}")]
    CheckpointMismatch { name: String, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
