//! Targeted adaptive design (TAD) for inverse problems with vector-valued
//! designs.
//!
//! A multitask Gaussian process models the map from control points to design
//! vectors. Each iteration proposes a target point `x` together with a batch
//! `x₂` of exploratory points chosen to maximize the expected predictive
//! log-likelihood of the target design at `x`. A χ² test on every batch guards
//! the surrogate, and the campaign stops once the uncertainty box at `x` fits
//! inside the target tolerance region (success) or the expected information
//! gain stays negligible for long enough (failure).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acquisition;
pub mod campaign;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod par;
pub mod testbed;
pub mod validation;

pub use acquisition::{
    correction_term, domain_penalty, expected_information_gain, predictive_log_likelihood,
    tad_acquisition, AcquisitionBreakdown, AcquisitionContext, AcquisitionInputs,
};
pub use error::{Result, TadError};
pub use gp::{Dataset, NormalDist};
pub use kernel::{KernelComponent, KernelModel, ScalarKernelParams, TaskMatrixParams};
pub use validation::{chi2_right_tail, ValidationKind, ValidationReport};
