use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate utterance: signal has zero energy")]
    ZeroEnergy,

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("container shape mismatch: {0}")]
    ContainerShape(String),

    #[error("teacher/student length mismatch: {teacher_frames} teacher frames, need at least {needed}")]
    LengthMismatch { teacher_frames: usize, needed: usize },

    #[error("k-means needs at least as many samples as clusters ({samples} < {clusters})")]
    TooFewSamples { samples: usize, clusters: usize },

    #[error("codebook inertia is zero; use hard one-hot labels for a perfectly clustered codebook")]
    ZeroInertia,

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("loss region selects no frames")]
    EmptyRegion,

    #[error("training diverged at step {step}: non-finite loss")]
    NonFinite { step: usize },

    #[error("missing unit labels for utterance {0}")]
    MissingLabels(String),

    #[error("unknown layer index {layer} (encoder exposes layers 0..={max})")]
    UnknownLayer { layer: usize, max: usize },

    #[error("units absent from representation table: {0:?}")]
    MissingUnits(Vec<usize>),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
