use thiserror::Error;

/// Errors raised by the ensemble bridge solver and simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector contained NaN or infinite entries, or had the wrong shape.
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    /// A scalar parameter violated its precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A time or index argument fell outside its admissible range.
    #[error("{what} = {value} outside admissible range [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// The averaged Gramian is numerically singular on the interval.
    #[error(
        "ensemble not averaged-controllable on [{s}, {t}]: min eigenvalue {min_eig:e} <= tolerance {tol:e}"
    )]
    NotControllable { s: f64, t: f64, min_eig: f64, tol: f64 },

    /// Cholesky factorization failed.
    #[error("covariance not SPD: {0}")]
    NotSpd(String),

    /// The Gramian tail G(t_f, t) vanishes at the horizon.
    #[error("Gramian tail singular at horizon (step {step} of {steps})")]
    SingularTail { step: usize, steps: usize },

    /// Sinkhorn iteration budget exhausted.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    /// A Sinkhorn denominator vanished on the support of a marginal.
    #[error("marginal support mismatch: {0}")]
    SupportMismatch(String),

    /// The posterior numerator vanished on the whole target grid.
    #[error("posterior support error at step {step}: target grid misses the conditional mass")]
    PosteriorSupport { step: usize },

    /// A controller was queried out of sequence or on a mismatched grid.
    #[error("controller protocol violation: {0}")]
    Protocol(String),

    /// Tabular input could not be read or parsed.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
