use std::path::PathBuf;

use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("{op}: dimension mismatch, left shape {lhs:?} vs right shape {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A static configuration value is out of its legal range.
    #[error("configuration error: {0}")]
    Config(String),

    /// An elementwise function was evaluated outside its domain.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// An API contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("scene label {label} out of range 0..{num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// A dataset file could not be read or decoded.
    #[error("data error for {path}: {msg}")]
    Data { path: PathBuf, msg: String },

    /// Training produced a NaN or infinite loss component.
    #[error("non-finite loss at iteration {iteration}: {component} = {value}")]
    NonFiniteLoss {
        iteration: u64,
        component: String,
        value: f64,
    },

    /// Checkpoint does not start with the expected magic bytes.
    #[error("checkpoint format error: bad magic bytes")]
    CheckpointMagic,

    /// Checkpoint was written by an incompatible format version.
    #[error("checkpoint version mismatch: file has v{found}, expected v{expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    /// Checkpoint file ends before its declared payload.
    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    /// Checkpoint contains a tensor the current model does not declare.
    #[error("checkpoint has unknown tensor {name:?}")]
    CheckpointUnknownTensor { name: String },

    /// Checkpoint is missing a tensor the current model requires.
    #[error("checkpoint is missing tensor {name:?}")]
    CheckpointMissingTensor { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
