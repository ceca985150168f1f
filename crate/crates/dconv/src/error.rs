use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DconvError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("layer {layer}: {what} mismatch, previous layer produces {expected} but this layer expects {found}")]
    ChainShapeMismatch { layer: usize, what: &'static str, expected: usize, found: usize },
    #[error("no layer with id {0}")]
    UnknownLayer(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("unsupported configuration: {0}")]
    Unsupported(&'static str),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] dconv_core::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, DconvError>;
