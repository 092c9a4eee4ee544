use std::path::PathBuf;

use crate::registration::AffineTransform;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("write error on {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("empty mask: {0}")]
    EmptyMask(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("degenerate intensities: {0}")]
    DegenerateIntensity(String),
    #[error("interpolation mode: {0}")]
    Mode(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("landmark not found: {0}")]
    Landmark(String),
    #[error("registration did not converge: {message}")]
    Convergence {
        message: String,
        best: Box<AffineTransform>,
    },
}

impl Error {
    /// Short machine-readable name of the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Write { .. } => "write",
            Error::Format(_) => "format",
            Error::Unsupported(_) => "unsupported",
            Error::Data(_) => "data",
            Error::EmptyMask(_) => "empty_mask",
            Error::Geometry(_) => "geometry",
            Error::DegenerateIntensity(_) => "degenerate_intensity",
            Error::Mode(_) => "mode",
            Error::Argument(_) => "argument",
            Error::Degenerate(_) => "degenerate",
            Error::Landmark(_) => "landmark",
            Error::Convergence { .. } => "convergence",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
