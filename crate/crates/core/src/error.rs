//! Crate-wide error type.
//!
//! Every variant maps onto one of the stable CLI prefixes returned by
//! [`Error::code`], so callers can grep diagnostics without parsing prose.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Io(String),

    #[error("{0}")]
    Shape(String),

    #[error("weighted normal matrix is singular (condition {condition:.3e})")]
    Singular { condition: f64 },

    #[error("{0}")]
    Diverge(String),

    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Degenerate(String),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Stable, grep-able prefix used in CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io(_) => "ERR_IO",
            Error::Shape(_) => "ERR_SHAPE",
            Error::Singular { .. } => "ERR_SINGULAR",
            Error::Diverge(_) => "ERR_DIVERGE",
            Error::Config(_) => "ERR_CONFIG",
            Error::Degenerate(_) => "ERR_DEGENERATE",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<::image::ImageError> for Error {
    fn from(e: ::image::ImageError) -> Self {
        Error::Io(e.to_string())
    }
}
