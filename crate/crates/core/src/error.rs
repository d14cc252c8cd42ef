use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported version {0}")]
    BadVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("trailing bytes: expected {expected} payload bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },

    #[error("dimension overflow in header")]
    DimOverflow,

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("unknown norm kind {0}")]
    UnknownNormKind(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("sequence too short: {0} valid positions, need at least 2")]
    SequenceTooShort(usize),

    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },

    #[error("line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("heterogeneous dims: {0}")]
    Heterogeneous(String),

    #[error("feature {feature} is not finite for trace {trace}")]
    NonFiniteFeature { feature: String, trace: String },

    #[error("single-class input: both members and nonmembers are required")]
    SingleClass,

    #[error("class {class} has {count} rows, fewer than {k} folds")]
    ClassTooSmall { class: u8, count: usize, k: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no paired trace for id {0}")]
    MissingPair(String),

    #[error("missing raw text for id {0}")]
    MissingText(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl Error {
    pub(crate) fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
