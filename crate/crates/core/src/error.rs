//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// A configuration value is out of its documented range.
    #[error("config error: {0}")]
    Config(String),
    /// An operation was called outside its contract (wrong mode, wrong step, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// A step or element index is out of range.
    #[error("index error: {0}")]
    Index(String),
    /// An operation produced NaN or Inf; surfaced instead of propagated.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// An image with no foreground where foreground is required.
    #[error("empty image: {0}")]
    EmptyImage(String),
    /// Training produced a non-finite loss; carries enough context to reproduce.
    #[error("training diverged at step {step} (batch {batch:?}): {detail}")]
    Diverged {
        step: usize,
        batch: Vec<usize>,
        detail: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    /// A file exists but its contents are not what the format requires.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn index(msg: impl Into<String>) -> Self {
        Error::Index(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
