use std::path::PathBuf;

/// Errors raised by the spectral, masking, detection and evaluation stages.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("image is {height}x{width}, but at least {min}x{min} is required")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("dimension mismatch: expected {expected:?}, found {found:?}{}", index.map(|i| format!(" (image {i})")).unwrap_or_default())]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
        index: Option<usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("calibration needs at least {required} scores, got {got}")]
    InsufficientSamples { required: usize, got: usize },

    #[error("relative difference is undefined for a zero baseline rate")]
    UndefinedBaseline,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{step} failed on {path}: {source}")]
    Step {
        step: &'static str,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_step(self, step: &'static str, path: impl Into<PathBuf>) -> Self {
        Error::Step {
            step,
            path: path.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
