use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value produced by layer {layer} ({kind})")]
    NonFinite { layer: usize, kind: &'static str },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("activation cache does not match this network: {0}")]
    StaleCache(&'static str),
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
    #[error("invalid optimizer settings: {0}")]
    InvalidOptimizer(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
