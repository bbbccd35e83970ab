use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by the filesystem rather than by inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
