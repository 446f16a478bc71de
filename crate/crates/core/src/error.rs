use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("softmax over a slice where every entry is -inf (slice {0})")]
    DegenerateSoftmax(usize),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm embedding")]
    ZeroEmbedding,

    #[error("no face found in any of {frames} sampled frames: {diagnostics}")]
    NoFace { frames: usize, diagnostics: String },

    #[error("clip {clip_id} cannot provide {wanted} references with pairwise pose gap > 45 deg")]
    InsufficientPoseSpread { clip_id: String, wanted: usize },

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bad tensor file: {0}")]
    TensorFormat(String),

    #[error("external extractor failed: {0}")]
    Extractor(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable kebab-case code used in single-line CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "dimension-mismatch",
            Error::DegenerateSoftmax(_) => "degenerate-row",
            Error::NonScalarRoot(_) => "non-scalar-root",
            Error::Config(_) => "config",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ZeroEmbedding => "zero-embedding",
            Error::NoFace { .. } => "no-face",
            Error::InsufficientPoseSpread { .. } => "insufficient-pose-spread",
            Error::CheckpointNotFound(_) => "checkpoint-not-found",
            Error::Parse { .. } => "parse",
            Error::TensorFormat(_) => "tensor-format",
            Error::Extractor(_) => "extractor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
