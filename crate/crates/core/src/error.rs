use thiserror::Error;

/// Errors produced by the numerical kernels, optimizers and loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} has value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFiniteEncountered(&'static str),

    #[error("non-finite input: {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite result in {0}")]
    NonFiniteResult(&'static str),

    #[error("power iteration did not converge within {iterations} iterations")]
    Stagnation { iterations: usize },

    #[error("index {index} out of range for dimension {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("duplicate index {0} in subset")]
    DuplicateIndex(usize),

    #[error("direction is not a descent direction (slope {slope:e})")]
    NotDescentDirection { slope: f64 },

    #[error("line search exceeded {max} backtracks")]
    MaxBacktracksExceeded { max: usize },

    #[error("argument out of range: {0}")]
    ArgumentOutOfRange(String),

    #[error("matrix of dimension {n} exceeds the dense materialization cap {cap}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("trace does not record iterates")]
    IteratesNotRecorded,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("parse error at row {row}, column {col}: {message}")]
    ParseCell { row: usize, col: usize, message: String },

    #[error("row {row} has {found} columns, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },

    #[error("expected two classes, found {found} distinct labels")]
    MoreThanTwoClasses { found: usize },

    #[error("cannot keep {requested} rows out of {available}")]
    TooFewRows { requested: usize, available: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
