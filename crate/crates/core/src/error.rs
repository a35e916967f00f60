use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {found} at offset 4 (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: header needs {expected} bytes, file has {found} (short at offset {found})")]
    TruncatedPayload { expected: u64, found: u64 },

    #[error("trailing bytes after payload: expected {expected} bytes, file has {found}")]
    TrailingBytes { expected: u64, found: u64 },

    #[error("non-finite entry at row {row}, column {col} (byte offset {offset})")]
    NonFiniteEntry { row: usize, col: usize, offset: u64 },

    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { id: String, row: usize },

    #[error("id sidecar lists {found} ids but header declares {expected} rows")]
    IdCountMismatch { expected: usize, found: usize },

    #[error("line {line}: unknown id {id:?}")]
    UnknownId { line: usize, id: String },

    #[error("line {line}: dimension mismatch")]
    LineDimensionMismatch { line: usize },

    #[error("line {line}: malformed record: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("bank is empty")]
    EmptyBank,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bank holds {available} rows but {requested} neighbors were requested")]
    InsufficientNeighbors { requested: usize, available: usize },

    #[error("prediction vector {index} is not a probability distribution (sum {sum})")]
    NotDistribution { index: usize, sum: f64 },

    #[error("target vector {index} is not one-hot")]
    NotOneHot { index: usize },

    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("ranked candidates do not contain the positive {0:?}")]
    MissingPositive(String),

    #[error("grid has {size} points, cap is {cap}")]
    GridTooLarge { size: usize, cap: usize },

    #[error("episode generation needs at least two clusters")]
    NeedTwoClusters,

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
