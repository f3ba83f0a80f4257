use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding an HSIC container or a checkpoint.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("dimension mismatch: cube is {width}x{height} but label grid holds {found} entries")]
    DimensionMismatch {
        width: usize,
        height: usize,
        found: usize,
    },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("class {class} has {available} samples, {required} required")]
    Split {
        class: u16,
        available: usize,
        required: usize,
    },
    #[error("episode error: {0}")]
    Episode(String),
    #[error("mixing error: {0}")]
    Mixing(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("non-finite loss at episode {episode}: {detail}")]
    NonFiniteLoss { episode: usize, detail: String },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("render error: {0}")]
    Render(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
