use std::path::PathBuf;

use crate::model::Model;
use crate::trainer::RunHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("state-dim not divisible: state_dim {state_dim} is not divisible by ratio {ratio}")]
    NotDivisible { state_dim: usize, ratio: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad magic: expected \"GRNN\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncation: {0}")]
    Truncated(String),

    #[error("checkpoint tensor mismatch: {0}")]
    TensorMismatch(String),

    #[error("training diverged at epoch {}", .0.epoch)]
    Diverged(Box<DivergedRun>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// State retained when a training run produced a non-finite loss.
#[derive(Debug)]
pub struct DivergedRun {
    pub epoch: usize,
    /// Best parameters seen before the divergence.
    pub last_good: Model,
    pub history: RunHistory,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
