use std::path::PathBuf;

use auv_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AuvError>;

#[derive(Debug, Error)]
pub enum AuvError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid mesh: {0}")]
    Validation(String),
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss in stage {stage}, epoch {epoch}, term {term}")]
    Numerical {
        stage: usize,
        epoch: usize,
        term: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl AuvError {
    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            AuvError::Config(_) | AuvError::Json(_) => 2,
            AuvError::Numerical { .. } => 4,
            _ => 3,
        }
    }
}
