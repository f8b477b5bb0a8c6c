use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MasonError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MasonError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("missing counterpart for {name}: no file in {missing}")]
    MissingCounterpart { name: String, missing: String },

    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),

    #[error("unknown layer {layer} for adapter `{adapter}`")]
    UnknownLayer { adapter: String, layer: usize },

    #[error("channel mismatch: expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("input {height}x{width} is not divisible by stride {stride}")]
    SpatialDivisibility {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("missing decoder level {0}")]
    MissingLevel(usize),

    #[error("dataset has no change labels: {0}")]
    MissingLabel(String),

    #[error("non-finite loss at step {step}: {diagnostic}")]
    NonFiniteLoss { step: usize, diagnostic: String },

    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl MasonError {
    /// Stable machine-readable class used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            MasonError::Validation(_) => "validation",
            MasonError::ShapeMismatch(_) => "shape-mismatch",
            MasonError::EmptyInput(_) => "empty-input",
            MasonError::OutOfRange(_) => "out-of-range",
            MasonError::MissingCounterpart { .. } => "missing-counterpart",
            MasonError::UnknownAdapter(_) => "unknown-adapter",
            MasonError::UnknownLayer { .. } => "unknown-layer",
            MasonError::ChannelMismatch { .. } => "channel-mismatch",
            MasonError::SpatialDivisibility { .. } => "spatial-divisibility",
            MasonError::MissingLevel(_) => "missing-level",
            MasonError::MissingLabel(_) => "missing-label",
            MasonError::NonFiniteLoss { .. } => "non-finite-loss",
            MasonError::FileNotFound(_) => "file-not-found",
            MasonError::Checkpoint(_) => "checkpoint",
            MasonError::Io { .. } => "io",
            MasonError::Image { .. } => "image",
            MasonError::Parse(_) => "parse",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            MasonError::FileNotFound(path)
        } else {
            MasonError::Io { path, source }
        }
    }
}
