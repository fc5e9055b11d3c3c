use gaitforge_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaitError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("silhouette has no foreground pixels")]
    EmptySilhouette,
    #[error("malformed data: {0}")]
    Format(String),
    #[error("shape mismatch for '{name}': expected {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GaitError> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(GaitError::Config(msg.into()))
}

pub(crate) fn precondition<T>(msg: impl Into<String>) -> Result<T> {
    Err(GaitError::Precondition(msg.into()))
}
