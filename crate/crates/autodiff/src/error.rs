use thiserror::Error;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward needs a scalar loss, got a {rows}x{cols} node")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
