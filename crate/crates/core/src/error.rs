use thiserror::Error;

pub type Result<T> = std::result::Result<T, BrrlError>;

#[derive(Debug, Error)]
pub enum BrrlError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid input file; `line` is 1-based when the offending value could be located.
    #[error("{}", match .line { Some(l) => format!("line {l}: {}", .message), None => .message.clone() })]
    Invalid { line: Option<usize>, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BrrlError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        BrrlError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        BrrlError::Domain(msg.into())
    }
}
