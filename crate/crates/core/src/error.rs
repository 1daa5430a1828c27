use std::path::PathBuf;

use thiserror::Error;

use crate::types::HeadId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"ATND\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported ATND version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated dump: {what} needs {expected} bytes, {actual} available")]
    Truncated {
        what: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(u64),

    #[error("row ({layer}, {head}) sums to {sum}, outside tolerance {tolerance}")]
    RowNormalization {
        layer: usize,
        head: usize,
        sum: f64,
        tolerance: f64,
    },

    #[error("non-finite value {value} at ({layer}, {head}, {token})")]
    NonFinite {
        layer: usize,
        head: usize,
        token: usize,
        value: f32,
    },

    #[error("negative value {value} at ({layer}, {head}, {token})")]
    Negative {
        layer: usize,
        head: usize,
        token: usize,
        value: f64,
    },

    #[error("probability vector entry {index} is {value}, expected a nonnegative number")]
    NegativeProbability { index: usize, value: f64 },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("invalid region map: {0}")]
    Region(String),

    #[error("invalid sample metadata: {0}")]
    Meta(String),

    #[error("span [{start}, {end}) out of bounds for sequence length {len}")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },

    #[error("head {head} outside a {layers}x{heads} model")]
    HeadOutOfBounds {
        head: HeadId,
        layers: usize,
        heads: usize,
    },

    #[error("invalid metric config: {0}")]
    Config(String),

    #[error("distribution needs at least 2 entries for a concentration score, got {0}")]
    DegenerateLength(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no samples to aggregate")]
    EmptyInput,

    #[error("duplicate sample id {0:?}")]
    DuplicateSample(String),

    #[error("model needs at least 3 layers for a stage partition, got {0}")]
    TooFewLayers(usize),

    #[error("requested {requested} heads but only {available} are available")]
    NotEnoughHeads { requested: usize, available: usize },

    #[error("metric {0} is not present in this table")]
    MissingMetric(&'static str),

    #[error("zero variance in {0} vector")]
    ZeroVariance(&'static str),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("vectors need at least {min} entries, got {got}")]
    TooShort { min: usize, got: usize },

    #[error("invalid toy model config: {0}")]
    ToyConfig(String),

    #[error("dataset size must be at least 1")]
    EmptyDataset,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
