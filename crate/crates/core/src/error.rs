use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An input value violates an operation's precondition.
    #[error("validation error: {0}")]
    Validation(String),

    /// Inconsistent or unknown configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or gradient stopped being finite.
    #[error("numerical error: {message}")]
    NonFinite {
        message: String,
        /// Where the offending batch was written, if anywhere.
        dump: Option<PathBuf>,
    },

    /// A file the operation depends on does not exist.
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    /// A file exists but is not in the expected format.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
