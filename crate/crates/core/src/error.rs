use thiserror::Error;

use crate::pipeline::io::FormatError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("symmetric eigensolver failed to converge on a {dim}x{dim} matrix")]
    NonConvergence { dim: usize },

    #[error("matrix is not positive definite: smallest eigenvalue {min_eigenvalue:e} <= floor {floor:e}")]
    NotPositiveDefinite { min_eigenvalue: f64, floor: f64 },

    #[error("{solver} did not converge within {iterations} iterations (last residual {residual:e})")]
    MaxIterationsExceeded {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("Newton line search stalled at iteration {iteration} (gradient norm {gradient_norm:e})")]
    LineSearchStalled { iteration: usize, gradient_norm: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid quadratic form: {0}")]
    InvalidForm(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("region {region} has zero variance in the window starting at sample {window}")]
    ZeroVariance { region: usize, window: usize },

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

impl Error {
    /// True for failures of an iterative or factorization routine, as opposed
    /// to malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::NotPositiveDefinite { .. }
                | Error::MaxIterationsExceeded { .. }
                | Error::LineSearchStalled { .. }
                | Error::Singular(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Format(FormatError::Io(e))
    }
}
