use thiserror::Error;

/// Errors surfaced by the solvers, estimators and file formats in this crate.
#[derive(Debug, Error)]
pub enum DrocError {
    #[error("non-finite value produced in {0}")]
    NumericalFault(&'static str),

    #[error("steering angle {delta} is at the tan singularity (|delta| must be < pi/2)")]
    SingularLinearization { delta: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionError {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("risk parameter infeasible at step {step}: smallest eigenvalue {min_eig:e} of W^-1 - theta*S is not positive")]
    RiskInfeasible { step: usize, min_eig: f64 },

    #[error("control Hessian not positive definite at step {step} after regularization up to {max_reg:e}")]
    SingularH { step: usize, max_reg: f64 },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("kernel matrix could not be factorized even with jitter {jitter:e}")]
    IllConditionedKernel { jitter: f64 },

    #[error("receding horizon n={n} must be smaller than the number of training states m={m}")]
    WindowTooLarge { n: usize, m: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DrocError> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(DrocError::DimensionError {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
