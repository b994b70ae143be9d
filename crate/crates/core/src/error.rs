use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 0..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("reverse step must go backwards in time (t={t}, t_prev={t_prev})")]
    InvalidStep { t: usize, t_prev: usize },
    #[error("inference ratio must be in 1..=T (got {ratio}, T={steps})")]
    InvalidRatio { ratio: usize, steps: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("gaussian initialization requires an entropy source")]
    MissingEntropy,
    #[error("feature dimension mismatch: model expects {expected}, input has {got}")]
    FeatureDim { expected: usize, got: usize },
    #[error("graph {0} has no nodes")]
    EmptyGraph(usize),
    #[error("width {width} is not divisible by {heads} heads")]
    IndivisibleHeads { width: usize, heads: usize },
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: u64 },
    #[error("{elements} elements cannot be placed into {slots} slots")]
    TooManyElements { elements: usize, slots: usize },
    #[error("non-finite predicted position at element {0}")]
    NonFinitePosition(usize),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("need at least {min} elements, got {got}")]
    TooFewElements { got: usize, min: usize },
    #[error("grid size must be at least 1")]
    InvalidGrid,
    #[error("image {width}x{height} is too small: {reason}")]
    ImageTooSmall { width: u32, height: u32, reason: String },
    #[error("patch must be {expected}x{expected} pixels, got {got} values")]
    PatchSize { expected: usize, got: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("vocabulary of {vocab} tokens is too small for {elements} elements")]
    VocabTooSmall { vocab: usize, elements: usize },
    #[error("checkpoint has bad magic or version (expected PDCKPT1)")]
    BadMagic,
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint {what} mismatch: checkpoint has {found}, configuration needs {expected}")]
    DimensionMismatch { what: String, expected: usize, found: usize },
    #[error("checkpoint is missing array `{0}`")]
    MissingArray(String),
    #[error("task mismatch: expected {expected}, got {got}")]
    TaskMismatch { expected: String, got: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
