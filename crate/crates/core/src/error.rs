use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("run lengths sum to {actual}, expected {expected} pixels")]
    RunSumMismatch { expected: u64, actual: u64 },

    #[error("instance index {0} out of range [0, 1000)")]
    InstanceIndexOutOfRange(u32),

    #[error("invalid label map: {0}")]
    InvalidLabels(String),

    #[error("inconsistent segment table: {0}")]
    SegmentTable(String),

    #[error("instance {index}: visible mask is not contained in the amodal mask")]
    VisibleNotInAmodal { index: usize },

    #[error("invalid score {0}, expected a value in [0, 1]")]
    InvalidScore(f64),

    #[error("empty mask")]
    EmptyMask,

    #[error("empty mask sequence")]
    EmptySequence,

    #[error("matching instance too large for exhaustive search: {0} segments (max {1})")]
    OracleTooLarge(usize, usize),

    #[error("missing image pairing for `{0}`")]
    MissingPair(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("class {0} is not covered by the palette")]
    UnknownClass(u32),

    #[error("bad magic in {0}")]
    BadMagic(&'static str),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("pixel ({row}, {col}) probabilities sum to {sum}, not 1")]
    NotNormalized { row: usize, col: usize, sum: f64 },

    #[error("unsupported image format: {0}")]
    ImageFormat(String),

    #[error("placement failed after {0} attempts")]
    PlacementFailed(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dims_mismatch(expected: (u32, u32), actual: (u32, u32)) -> Error {
    Error::DimensionMismatch {
        expected: format!("{}x{}", expected.0, expected.1),
        actual: format!("{}x{}", actual.0, actual.1),
    }
}
