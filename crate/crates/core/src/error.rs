use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A numeric parameter is outside its valid domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// The API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN or infinity appeared where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("format error in {file} at byte {offset}: {message}")]
    Format {
        file: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
