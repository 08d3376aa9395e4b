use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid token layout: {0}")]
    InvalidLayout(String),

    #[error("token {index} is out of range for a sequence of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("retained set must keep every text and action token (missing {0})")]
    NonPrunableDropped(usize),

    #[error("token {0} is not a visual token")]
    NotVisual(usize),

    #[error("layer {0} was not captured")]
    LayerNotCaptured(usize),

    #[error("layer {0} is not in the update schedule")]
    LayerNotScheduled(usize),

    #[error("empty text range")]
    EmptyTextRange,

    #[error("empty token set")]
    EmptyTokenSet,

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("invalid run config: {0}")]
    InvalidRunConfig(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
