use thiserror::Error;

/// Errors raised by the solvers, flows and oracles.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Argument outside the domain of a conjugate or derivative.
    #[error("domain error: {0}")]
    Domain(String),

    /// No admissible measure, or a root could not be bracketed.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// The OCE integrability condition fails at an initial state carrying mass.
    #[error("dual infeasible at initial state {state}: {reason}")]
    DualInfeasible { state: usize, reason: String },

    #[error("did not converge after {iterations} iterations (initial residual {residual_initial:.3e}, terminal residual {residual_terminal:.3e})")]
    Unconverged {
        iterations: usize,
        residual_initial: f64,
        residual_terminal: f64,
    },

    #[error("numerical failure in {context}: residual {residual:.3e}")]
    NumericalFailure { context: String, residual: f64 },

    #[error("support error: {0}")]
    Support(String),

    #[error("instance too large: {count} exceeds limit {limit}")]
    TooLarge { count: u128, limit: u128 },

    /// The divergence-regularized solvers need `mu0 == nu0` outside the entropic case.
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("statistical failure: {0}")]
    StatisticalFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
