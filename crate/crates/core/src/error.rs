use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("color input rejected: {path} has {channels} channels, expected 8-bit grayscale")]
    ColorInput { path: PathBuf, channels: u8 },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate patch: zero norm at ({row}, {col})")]
    DegeneratePatch { row: usize, col: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("registration failed: {0}")]
    Registration(String),

    #[error("malformed library file: {0}")]
    LibraryFormat(String),

    #[error("malformed record: {0}")]
    Record(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

impl Error {
    /// Whether the error stems from bad input (files, formats, parameters)
    /// rather than from a failure while processing valid input.
    pub fn is_input_error(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::DegeneratePatch { .. } | Error::EmptyInput(_) | Error::Registration(_)
        )
    }
}
