use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {file}: {source}")]
    Read {
        file: PathBuf,
        source: std::io::Error,
    },

    #[error("invalid config {file}: {message}")]
    Parse { file: PathBuf, message: String },

    #[error("dataset not found: {0}")]
    MissingData(PathBuf),

    #[error("cannot write {file}: {source}")]
    Write {
        file: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] negdistill::Error),
}

impl CliError {
    /// 3 for numerical failures during training, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(negdistill::Error::Numerical(_)) => 3,
            _ => 2,
        }
    }
}
