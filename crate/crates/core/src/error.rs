use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("no cached key/value for timestep {timestep}, layer {layer}")]
    CacheMiss { timestep: usize, layer: usize },
    #[error("key/value already cached for timestep {timestep}, layer {layer}")]
    CacheOverwrite { timestep: usize, layer: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
