use thiserror::Error;

/// Errors raised by the sparse Laplace machinery and the estimation layer.
///
/// Block and time indices are zero-based.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not positive definite: block pivot failed at time index {0}")]
    NotPositiveDefinite(usize),

    #[error("critical path search did not converge after {iterations} iterations (max |gradient| = {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("Hessian stayed indefinite at time index {0} after diagonal boosting")]
    IndefiniteHessian(usize),

    #[error("state outside model domain: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("objective evaluation failed at theta = {theta:?}: {reason}")]
    ObjectiveFailure { theta: Vec<f64>, reason: String },

    #[error("no parameter vector could be evaluated")]
    AllFailed,

    #[error("integrand is not finite on the integration domain")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, Error>;
