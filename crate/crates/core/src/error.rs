use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("require s < t, got s={s}, t={t}")]
    BadTimeOrder { s: f64, t: f64 },
    #[error("non-finite loss at t={t}")]
    NonFiniteLoss { t: f64 },
    #[error("non-finite activations at sampling step {step}")]
    NonFiniteSample { step: usize },
    #[error("slice {slice}: {source}")]
    SliceFailure {
        slice: usize,
        source: Box<Error>,
    },
    #[error("invalid schedule descriptor `{0}`")]
    BadScheduleDescriptor(String),
    #[error("invalid architecture config: {0}")]
    BadArchConfig(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("NIfTI magic mismatch")]
    MagicMismatch,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: expected {expected} bytes of voxel data, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error("feature file corrupt: {0}")]
    CorruptFeatureFile(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
