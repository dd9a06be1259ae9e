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

    #[error("bad magic bytes {found:?}, expected \"CCAF\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported pack version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("truncated pack: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(u64),

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("row {0} has zero norm")]
    ZeroRow(usize),

    #[error("label {label} at position {index} is out of range for {n_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        n_classes: usize,
    },

    #[error("label pack must have one column holding exact integers: {0}")]
    BadLabels(String),

    #[error("shot count violation: {0}")]
    ShotCount(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank deficient covariance: component {component} has eigenvalue {eigenvalue:e}")]
    RankDeficient { component: usize, eigenvalue: f64 },

    #[error("matrix is singular (smallest eigenvalue of W*W^T is {0:e})")]
    Singular(f64),

    #[error("constant column {0} has zero variance")]
    ConstantColumn(usize),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient { .. }
                | Error::Singular(_)
                | Error::NonFiniteGradient(_)
                | Error::ConstantColumn(_)
        )
    }
}
