use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
///
/// Each failure class has its own variant so callers (and the CLI exit
/// path) can tell a malformed file from an unsolvable scene.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("degenerate rotation parameters: {0}")]
    DegenerateRotation(String),

    #[error("angle undefined for a zero-length vector")]
    UndefinedAngle,

    #[error("{path}: parse error: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid depth bounds: {0}")]
    Bounds(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u8 },

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("unsolvable scene: {0}")]
    UnsolvableScene(String),

    #[error("pose graph is disconnected")]
    DisconnectedGraph,

    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("scene contains no gaussians")]
    EmptyScene,

    #[error("objective diverged: {0}")]
    Divergence(String),

    #[error("image codec error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
