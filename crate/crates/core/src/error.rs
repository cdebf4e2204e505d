//! Error types shared across the crate.

use thiserror::Error;

/// Numerical failure inside the differentiation engine.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum EngineError {
    #[error("non-finite value produced by `{op}` at node {node} (derivative order {order})")]
    NonFinite { node: usize, op: &'static str, order: u8 },
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("operation `{op}` cannot be differentiated further")]
    NotDifferentiable { op: &'static str },
}

/// Dataset / scene loading failures.
#[derive(Error, Debug)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("cameras.json parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing file: {0}")]
    Missing(String),
    #[error("camera {view}: rotation block not orthonormal (deviation {deviation:.3e})")]
    BadRotation { view: usize, deviation: f64 },
    #[error("camera {view}: intrinsic matrix not invertible")]
    BadIntrinsic { view: usize },
    #[error("view index {index} out of range (dataset has {count} views)")]
    BadView { index: usize, count: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Run configuration failures.
#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("bad config value: {0}")]
    BadValue(String),
}

/// Checkpoint container failures.
#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}
