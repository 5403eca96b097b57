//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("missing class in embedding archive: {0}")]
    MissingClass(String),
    #[error("missing tensor in archive: {0}")]
    MissingTensor(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}: ce={ce} l_ar={l_ar} l_amc={l_amc}")]
    NonFiniteLoss { step: usize, ce: f64, l_ar: f64, l_amc: f64 },
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;
