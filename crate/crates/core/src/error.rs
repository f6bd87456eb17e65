use disent_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mining failed: {0}")]
    Mining(String),
    #[error("training diverged at iteration {iter}: non-finite {component} objective")]
    Divergence { component: String, iter: usize },
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),
    #[error("enumeration too large: {0}")]
    Size(String),
    #[error("dataset format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for CoreError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => CoreError::Io(io),
            other => CoreError::Format(format!("{other:?}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
