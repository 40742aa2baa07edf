use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("region of interest too small: {height} rows (need at least 8)")]
    RoiTooSmall { height: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("dataset too small: {got} samples, need at least {need}")]
    DatasetTooSmall { got: usize, need: usize },

    #[error("sample {index} has a zero ground-truth count")]
    ZeroGroundTruth { index: usize },

    #[error("features overlap beyond the packing limit: {0}; use fewer features or a smaller bump radius")]
    Packing(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
