use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid depth {0}: must be finite and > 0")]
    InvalidDepth(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("requested {requested} views but only {available} are available")]
    NotEnoughViews { requested: usize, available: usize },
    #[error("need at least {required} frames, got {found}")]
    NotEnoughFrames { required: usize, found: usize },
    #[error("scene does not fit the oracle grid: {0}")]
    SceneOutOfBounds(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
