use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library surfaces.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("empty crop: box ({x0}, {y0}, {x1}, {y1}) does not intersect a {width}x{height} image")]
    EmptyCrop {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        width: usize,
        height: usize,
    },

    #[error("face detection failed: {0}")]
    Detection(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: tensor `{name}`: {detail}")]
    IncompatibleCheckpoint { name: String, detail: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("numeric fault: non-finite value in `{layer}`{}", batch.map(|b| format!(" (batch {b})")).unwrap_or_default())]
    NumericFault { layer: String, batch: Option<usize> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("too few entries: {0}")]
    TooFewEntries(String),

    #[error("pose dataset is missing classes {0:?}")]
    MissingPoseClasses(Vec<u8>),

    #[error("metric needs both classes present: {0}")]
    SingleClass(String),

    #[error("empty split `{0}`")]
    EmptySplit(String),

    #[error("unsupported layer `{layer}`: {reason}")]
    UnsupportedLayer { layer: String, reason: String },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {}: {message}", path.display())]
    ImageCodec { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
