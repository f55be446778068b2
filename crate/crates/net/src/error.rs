use std::path::PathBuf;

use thiserror::Error;

use crate::codec::CodecError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("image {width}x{height} is smaller than the 64x64 minimum")]
    UndersizedImage { width: u32, height: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("config key {key:?}: {msg}")]
    ConfigKey { key: String, msg: String },
    #[error(transparent)]
    Data(#[from] tdla_core::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

impl NetError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NetError::Io { path: path.into(), source }
    }
}
