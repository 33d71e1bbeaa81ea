use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{kernel} kernel requires inputs in [0, 1], got {value}")]
    OutOfDomain { kernel: &'static str, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min:e} vs largest {max:e}")]
    NotPositiveSemidefinite { min: f64, max: f64 },

    #[error("symmetric eigensolver did not converge")]
    EigenSolverFailed,

    #[error("eigenvalues must be sorted in non-increasing order and nonnegative")]
    UnsortedEigenvalues,

    #[error("Cholesky factorization of {0} failed: matrix is not numerically positive definite")]
    FactorizationFailed(&'static str),

    #[error(
        "sketched system is numerically singular (condition number {condition:e}); \
         the projection dimension m or the regularization lambda is likely too small"
    )]
    IllConditioned { condition: f64 },

    #[error("variance estimate {value:e} is negative beyond rounding tolerance")]
    NegativeVariance { value: f64 },

    #[error("residual degrees of freedom n - tr(H) = {dof:e} must be positive")]
    DegreesOfFreedom { dof: f64 },

    #[error("sketch dimensions cannot shrink: ({m}, {n}) -> ({m2}, {n2})")]
    ShrinkingSketch { m: usize, n: usize, m2: usize, n2: usize },

    #[error("cannot draw {requested} items from a pool of {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("column `{0}` not found in CSV header")]
    MissingColumn(String),

    #[error("CSV row {row}: {message}")]
    CsvRow { row: usize, message: String },

    #[error("CSV file contains no data rows")]
    EmptyFile,

    #[error("malformed sketch file: {0}")]
    MalformedSketch(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures caused by the numerics (singular systems, solver breakdown)
    /// rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveSemidefinite { .. }
                | Error::EigenSolverFailed
                | Error::FactorizationFailed(_)
                | Error::IllConditioned { .. }
                | Error::NegativeVariance { .. }
                | Error::DegreesOfFreedom { .. }
                | Error::NonFinite(_)
        )
    }
}
