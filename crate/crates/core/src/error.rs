use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing target column `{0}`")]
    MissingTargetColumn(String),
    #[error("unparseable cell at row {row}, column {col}: `{value}`")]
    Parse { row: usize, col: usize, value: String },
    #[error("malformed csv at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("degenerate split: {train} train rows, {test} test rows")]
    DegenerateSplit { train: usize, test: usize },
    #[error("invalid fold count: k={k}, n={n}")]
    InvalidFolds { k: usize, n: usize },
    #[error("metric {metric} does not apply: {reason}")]
    MetricMismatch { metric: String, reason: String },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty feature subset")]
    EmptySubset,
    #[error("invalid feature subset: {0}")]
    InvalidSubset(String),
    #[error("classification target has a single class")]
    SingleClass,
    #[error("k={k} out of range for {p} features")]
    KOutOfRange { k: usize, p: usize },
    #[error("record store fingerprint mismatch: expected {expected}, found {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, record {record}")]
    NonFiniteLoss { epoch: usize, record: usize },
    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),
    #[error("unknown token id {0}")]
    UnknownToken(usize),
    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),
    #[error("not enough base records: need {need}, have {have}")]
    NotEnoughRecords { need: usize, have: usize },
    #[error("every candidate failed evaluation: {0}")]
    AllCandidatesFailed(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid record store: {0}")]
    RecordStore(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
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
