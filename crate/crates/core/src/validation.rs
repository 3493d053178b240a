//! χ² model-adequacy statistics for batch predictions and training fit.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TadError};
use crate::gp::{Conditioned, Dataset, NormalDist};
use crate::kernel::KernelModel;
use crate::linalg::SpdFactor;

const MAX_ITER: usize = 500;
const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    BatchQ,
    TrainingS,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub kind: ValidationKind,
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut s = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        s += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

/// Regularized upper incomplete gamma `Q(a, x) = Γ(a, x)/Γ(a)`.
pub fn gamma_q(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(x >= 0.0) {
        return Err(TadError::ContractViolation(format!(
            "incomplete gamma needs a > 0 and x >= 0 (a = {a}, x = {x})"
        )));
    }
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    let log_prefactor = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // series for P(a, x)
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..MAX_ITER {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        Ok((1.0 - sum * log_prefactor.exp()).clamp(0.0, 1.0))
    } else {
        // modified Lentz continued fraction for Q(a, x)
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..=MAX_ITER {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        Ok((log_prefactor.exp() * h).clamp(0.0, 1.0))
    }
}

/// Right-tail probability `P(χ²_dof > q)`.
pub fn chi2_right_tail(q: f64, dof: usize) -> Result<f64> {
    if dof == 0 {
        return Err(TadError::ContractViolation(
            "χ² tail needs at least one degree of freedom".into(),
        ));
    }
    if !(q >= 0.0) {
        return Err(TadError::ContractViolation(format!(
            "χ² statistic must be non-negative, got {q}"
        )));
    }
    if dof == 2 {
        return Ok((-0.5 * q).exp());
    }
    gamma_q(0.5 * dof as f64, 0.5 * q)
}

/// Batch statistic `Q = (g₂ - p)ᵀ Σ⁻¹ (g₂ - p)` against the data predictive law.
pub fn batch_validation(pred: &NormalDist, observed: &[f64]) -> Result<ValidationReport> {
    check_dim("validated batch", pred.dim(), observed.len())?;
    if observed.is_empty() {
        return Err(TadError::ContractViolation(
            "batch validation needs at least one observation".into(),
        ));
    }
    let f = SpdFactor::new(&pred.cov, "Q(2|1) for validation")?;
    let r = DVector::from_column_slice(observed) - &pred.mean;
    let statistic = f.quad_form(&r);
    let dof = observed.len();
    Ok(ValidationReport {
        statistic,
        dof,
        p_value: chi2_right_tail(statistic, dof)?,
        kind: ValidationKind::BatchQ,
    })
}

/// Training-fit quadratic form `S = (g₁-μ)ᵀ(K₁₁+Σ₁)⁻¹(g₁-μ)` on `N₁E - E` degrees of freedom.
pub fn training_fit(model: &KernelModel, data: &Dataset) -> Result<ValidationReport> {
    let cond = Conditioned::new(model, data)?;
    training_fit_conditioned(&cond)
}

pub(crate) fn training_fit_conditioned(cond: &Conditioned<'_>) -> Result<ValidationReport> {
    let e = cond.model().tasks();
    let n = cond.data().len() * e;
    let dof = n.saturating_sub(e).max(1);
    let statistic = cond.residual_quad_form();
    Ok(ValidationReport {
        statistic,
        dof,
        p_value: chi2_right_tail(statistic, dof)?,
        kind: ValidationKind::TrainingS,
    })
}
