use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("{axis}={size} not divisible by {divisor}")]
    Indivisible { axis: char, size: usize, divisor: usize },

    #[error("spatial size {height}x{width} too small for a depth-{depth} block (needs at least {min})")]
    TooSmall { height: usize, width: usize, depth: usize, min: usize },

    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("unsupported image size {width}x{height}: expected 1920x1080 or 1280x1024")]
    CanvasSize { width: usize, height: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid fold request: {0}")]
    Fold(String),

    #[error("invalid augmentation: {0}")]
    Augment(String),

    #[error("dataset layout: {0}")]
    Layout(String),

    #[error("missing ground truth for frame {0}")]
    MissingMask(PathBuf),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(PathBuf),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint archive: {0}")]
    CorruptArchive(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("training fold has no samples")]
    EmptyTrainingFold,

    #[error("validation video {0} also appears in the training fold")]
    FoldLeak(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[cfg(feature = "io")]
    #[error(transparent)]
    Image(#[from] image::ImageError),
}
