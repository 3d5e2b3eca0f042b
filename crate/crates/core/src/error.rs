//! Crate-wide error type.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Chain or stiffness configuration is internally inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Stiffness polynomial evaluates non-positive somewhere in the
    /// admissible displacement range.
    #[error("stiffness parameter domain error: {0}")]
    ParameterDomain(String),

    /// Equilibrium solve did not meet the convergence tolerance. Carries the
    /// best iterate so callers can inspect how far the solve got.
    #[error("equilibrium solve failed after {iterations} iterations (projected gradient {residual:.3e}): {reason}")]
    SolverFailure {
        reason: String,
        iterations: usize,
        residual: f64,
        best: Box<crate::statics::EquilibriumResult>,
    },

    /// Line search could not reduce the potential energy.
    #[error("line search failure: {0}")]
    LineSearch(String),

    /// No admissible tension can hold the limit pose with nonnegative
    /// stopper contact.
    #[error("model inconsistency: {0}")]
    ModelInconsistency(String),

    /// Requested design is geometrically infeasible.
    #[error("design infeasible: {0}")]
    DesignInfeasible(String),

    /// Surrogate fit could not be constructed.
    #[error("fit error: {0}")]
    Fit(String),

    /// Malformed CSV input. `line` is 1-based and includes the header.
    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
