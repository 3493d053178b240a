use thiserror::Error;

/// Errors raised by the modelling, acquisition and campaign layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TadError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix of order {order} is numerically singular ({context}); jitter escalated to {max_jitter:e}")]
    NumericalSingularity {
        context: &'static str,
        order: usize,
        max_jitter: f64,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("optimization failed after {attempts} attempt(s): {reason}")]
    OptimizationFailure { attempts: usize, reason: String },

    #[error("campaign is awaiting {expected} external observation row(s)")]
    AwaitingObservations { expected: usize },

    #[error("campaign has already terminated with outcome {0}")]
    AlreadyTerminated(String),

    #[error("non-finite objective value at the probe point")]
    NonFinite,
}

pub type Result<T, E = TadError> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(TadError::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
