use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. Variants carry the measured quantity that tripped
/// them so callers (and the CLI) can report actionable numbers.
#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A kernel admissibility hypothesis failed.
    #[error("kernel hypothesis violated: {0}")]
    Hypothesis(String),

    /// A quadrature self-check did not converge to its tolerance.
    #[error("quadrature did not converge: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    Quadrature { residual: f64, tol: f64 },

    /// Requested value is outside the range attainable in f64 precision.
    #[error("precision loss: {0}")]
    PrecisionLoss(String),

    /// No solution exists for an inversion problem.
    #[error("no solution: {0}")]
    NoSolution(String),

    /// Degenerate configuration that would make a count or census ill-posed.
    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    /// A constructed field failed its consistency residual check.
    #[error("consistency check failed: {0}")]
    Consistency(String),

    /// Grid or discretization parameters are invalid.
    #[error("discretization error: {0}")]
    Discretization(String),

    /// Linear algebra breakdown (non-SPD matrix, singular pivot).
    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    /// The per-step fixed-point iteration failed to contract.
    #[error("fixed-point iteration failed at t = {t}: {iters} iterations, last contraction ratio {ratio:.3}")]
    FixedPoint { t: f64, iters: usize, ratio: f64 },

    /// Newton iteration for the limit problem stagnated.
    #[error("Newton iteration stagnated at t = {t}: residual {residual:.3e} after {iters} iterations")]
    NewtonStagnation { t: f64, iters: usize, residual: f64 },

    /// Stabilization detection matched more than one steady branch.
    #[error("ambiguous stabilization: branches {first} and {second} both within tolerance {tol:.3e}")]
    AmbiguousBranch { first: String, second: String, tol: f64 },

    /// Configuration rejected; `key` is the offending JSON path.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// A diagnostic study could not produce a conclusive fit.
    #[error("inconclusive study: {0}")]
    Inconclusive(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }
}
