use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid probability map: {0}")]
    InvalidProbMap(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("invalid model spec: {0}")]
    InvalidModelSpec(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("missing mask for labeled image {0}")]
    MissingMask(PathBuf),

    #[error("mask {path} has value {value} >= num_classes {num_classes}")]
    MaskValueOutOfRange {
        path: PathBuf,
        value: u32,
        num_classes: usize,
    },

    #[error("non-finite loss at epoch {epoch} step {step}: l_s={l_s} l_u={l_u}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        l_s: f64,
        l_u: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
