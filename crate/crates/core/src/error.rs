use std::path::PathBuf;

use crate::logit_store::Split;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("{path}: malformed meta.json: {message}")]
    MalformedMeta { path: PathBuf, message: String },

    #[error("unsupported version: format_version {0} (expected 1)")]
    UnsupportedVersion(u64),

    #[error("invalid metadata: {0}")]
    InvalidMeta(String),

    #[error("{file}: payload size mismatch: expected {expected} bytes, found {actual}")]
    PayloadSizeMismatch {
        file: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite logit {value} at byte offset {offset} (row {row}, class {class})")]
    NonFiniteLogit {
        offset: u64,
        row: usize,
        class: usize,
        value: f32,
    },

    #[error("label out of range: {label} at byte offset {offset} (row {row}, num_classes {num_classes})")]
    LabelOutOfRange {
        offset: u64,
        row: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bundle pair mismatch: {0}")]
    PairMismatch(String),

    #[error("undefined balance: large model has zero FLOPs")]
    UndefinedBalance,

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("split mismatch: expected {expected} bundle, got {found}")]
    SplitMismatch { expected: Split, found: Split },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined AUROC: predictions are all correct or all incorrect")]
    UndefinedAuroc,

    #[error("macro-F1 undefined: no class has support")]
    NoSupport,

    #[error("non-finite objective at {0:?}")]
    NonFiniteObjective(Vec<f64>),

    #[error("invalid simulation spec: {0}")]
    InvalidSimSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
