use thiserror::Error;

#[derive(Debug, Error)]
pub enum RlError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("environment fault at step {step}: {message}")]
    Env { step: usize, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize, partial: Box<crate::bpo::TrainingReport> },
    #[error(transparent)]
    Autodiff(#[from] brrl_autodiff::AutodiffError),
    #[error(transparent)]
    Core(#[from] brrl_core::BrrlError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RlError>;
