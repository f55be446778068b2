use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset} (line {line}, column {column}): {msg}")]
    Parse { offset: usize, line: usize, column: usize, msg: String },
    #[error("invalid COCO document: {0}")]
    Format(String),
    #[error("dangling annotation {annotation_id}: image_id {image_id} does not exist")]
    DanglingAnnotation { annotation_id: u64, image_id: u64 },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("dataset has {} violation(s); first: {}", .0.len(), .0.first().map(|v| v.to_string()).unwrap_or_default())]
    Invalid(Vec<Violation>),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("unknown builtin map {0:?}")]
    UnknownMap(String),
    #[error("taxonomy mismatch: {0}")]
    TaxonomyMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("mask is empty")]
    EmptyMask,
    #[error("infeasible: {0}")]
    Infeasible(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
