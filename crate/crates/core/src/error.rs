use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("unknown feature tap `{0}` (expected one of layer1, layer2, layer3, avgpool)")]
    UnknownTap(String),

    #[error("incompatible siamese configuration: {0}")]
    Incompatible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("no match possible: candidate list at {0} is empty")]
    NoCandidates(&'static str),

    #[error("{metric} is undefined: its denominator is zero")]
    UndefinedScore { metric: &'static str },

    #[error("no ground-truth annotation for case `{0}`")]
    MissingAnnotation(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    VersionMismatch { found: String, expected: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
