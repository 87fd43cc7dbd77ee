use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected `TFS1`, found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported dtype tag {0} (expected 0 or 1)")]
    BadDtype(u8),

    #[error("truncated input at byte offset {offset}: {what}")]
    Truncated { offset: u64, what: &'static str },

    #[error("dimension mismatch at row {row}: expected {expected}, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate example id {0}")]
    DuplicateId(u64),

    #[error("unknown example id {0}")]
    UnknownId(u64),

    #[error("empty feature store")]
    EmptyStore,

    #[error("matrix is not positive definite after {attempts} jitter attempts")]
    NotPositiveDefinite { attempts: u32 },

    #[error("degenerate rank-one denominator {value:e}")]
    DegenerateDenominator { value: f64 },

    #[error("negative posterior variance {0:e}")]
    NegativeVariance(f64),

    #[error("query has zero prior variance")]
    ZeroPriorVariance,

    #[error("zero variance in cosine normalization")]
    ZeroVariance,

    #[error("reference information {0:e} is too small to normalize by")]
    DegenerateReference(f64),

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("invalid budget {budget} for a pool of {pool} candidates")]
    InvalidBudget { budget: usize, pool: usize },

    #[error("query set is empty")]
    EmptyQuerySet,

    #[error("every query row is zero")]
    DegenerateQueries,

    #[error("ground-truth set is empty")]
    EmptyTruth,

    #[error("row {0} is the zero vector")]
    ZeroVectorRow(u64),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("greedy step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for failures of the numerical machinery rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite { .. }
            | Error::DegenerateDenominator { .. }
            | Error::NegativeVariance(_)
            | Error::ZeroVariance
            | Error::DegenerateReference(_) => true,
            Error::AtStep { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
        move |source| Error::AtStep {
            step,
            source: Box::new(source),
        }
    }
}
