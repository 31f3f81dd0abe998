use thiserror::Error;

/// Errors shared by the numerical kernels, model builders and samplers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {index} is non-positive)")]
    NotPositiveDefinite { index: usize },

    #[error("matrix is numerically singular (pivot {index} underflowed)")]
    Singular { index: usize },

    #[error("bandwidth mismatch: lower {lower} vs upper {upper}")]
    BandwidthMismatch { lower: usize, upper: usize },

    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,

    #[error("write outside the stored band at ({row}, {col})")]
    OutOfBand { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("length-scale fields differ in more than one coordinate")]
    MultiSiteDiff,

    #[error("operation not defined for hyperprior kind {actual} (needs {expected})")]
    WrongKind {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("hyperprior specs differ in more than the length-scale")]
    KindMismatch,

    #[error("invalid range: need 0 < min < max")]
    InvalidRange,

    #[error("observation location {x} is outside the grid hull")]
    OutOfHull { x: f64 },

    #[error("log-posterior is not finite at the current state")]
    NonFiniteLogPost,

    #[error("chain has zero variance")]
    DegenerateChain,

    #[error("chain is too short (need at least {minimum} values)")]
    ChainTooShort { minimum: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
