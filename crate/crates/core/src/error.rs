use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image geometry does not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value violates a model invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A weight file or image file could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Stable short name used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Whether the error stems from invalid user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Dimension(_) | Error::Config(_))
    }
}
