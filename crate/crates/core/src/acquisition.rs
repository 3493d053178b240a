//! The TAD acquisition function, its correction term `T`, the expected
//! information gain, and the out-of-domain penalty.
//!
//! With `A = K₁₁ + Σ₁`, `B = K_x2 - K_x1 A⁻¹ K₁₂` and
//! `Q(2|1) = K₂₂ + Σ₂ - K₂₁ A⁻¹ K₁₂`, the correction term is
//! `T = B Q(2|1)⁻¹ Bᵀ`, the updated predictive covariance is
//! `Q(f|1+2) = Q(f|1) - T`, and
//!
//! ```text
//! L_TAD = -½ log det(Q(f|1) - T)
//!         -½ rᵀ (Q(f|1) - T)⁻¹ r          r = f_T - p(f|1)
//!         -½ tr[T (Q(f|1) - T)⁻¹]
//! I     = -½ log det[1 - T Q(f|1)⁻¹]
//! ```
//!
//! Gradients with respect to the target point and every batch coordinate are
//! obtained by reverse-mode propagation through the block formulas down to
//! the kernel entries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TadError};
use crate::gp::{Conditioned, Dataset, NormalDist};
use crate::kernel::KernelModel;
use crate::linalg::{symmetrize, SpdFactor};

/// Arguments of the acquisition function.
#[derive(Debug, Clone)]
pub struct AcquisitionInputs<'a> {
    pub model: &'a KernelModel,
    pub data: &'a Dataset,
    pub batch_points: Vec<Vec<f64>>,
    pub target_point: Vec<f64>,
    pub target_design: Vec<f64>,
    /// Diagonal of `Σ₂`, length `N₂·E`.
    pub batch_noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionBreakdown {
    pub log_det_term: f64,
    pub data_fit_term: f64,
    pub trace_term: f64,
    pub total: f64,
    pub t: DMatrix<f64>,
    pub q_f1: DMatrix<f64>,
    pub q_f12: DMatrix<f64>,
    pub p_f1: DVector<f64>,
    pub eig_nats: f64,
}

/// Which scalar to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcqObjective {
    Tad,
    InformationGain,
}

/// Acquisition evaluator with `K₁₁ + Σ₁` factored once for many `(x, x₂)` probes.
pub struct AcquisitionContext<'a> {
    cond: Conditioned<'a>,
    target_design: DVector<f64>,
    /// Per-task batch noise, applied identically to every batch point.
    batch_noise_per_point: Vec<f64>,
}

struct Terms {
    w_x: DMatrix<f64>,
    w_2: DMatrix<f64>,
    p1: DVector<f64>,
    q1: DMatrix<f64>,
    b: DMatrix<f64>,
    f21: Option<SpdFactor>,
    t: DMatrix<f64>,
    m: DMatrix<f64>,
    r: DVector<f64>,
}

impl<'a> AcquisitionContext<'a> {
    pub fn new(
        model: &'a KernelModel,
        data: &'a Dataset,
        target_design: &[f64],
        batch_noise_per_point: &[f64],
    ) -> Result<Self> {
        let cond = Conditioned::new(model, data)?;
        check_dim("target design", model.tasks(), target_design.len())?;
        check_dim(
            "batch noise per point",
            model.tasks(),
            batch_noise_per_point.len(),
        )?;
        Ok(Self {
            cond,
            target_design: DVector::from_column_slice(target_design),
            batch_noise_per_point: batch_noise_per_point.to_vec(),
        })
    }

    /// Context for `inputs`, which must carry the same noise on every batch point.
    pub fn from_inputs(inputs: &AcquisitionInputs<'a>) -> Result<Self> {
        let e = inputs.model.tasks();
        check_dim(
            "batch noise diagonal",
            inputs.batch_points.len() * e,
            inputs.batch_noise.len(),
        )?;
        let per_point = if inputs.batch_noise.is_empty() {
            vec![0.0; e]
        } else {
            inputs.batch_noise[..e].to_vec()
        };
        for chunk in inputs.batch_noise.chunks(e) {
            if chunk != per_point.as_slice() {
                return Err(TadError::ContractViolation(
                    "batch noise must be identical for every batch point".into(),
                ));
            }
        }
        Self::new(inputs.model, inputs.data, &inputs.target_design, &per_point)
    }

    pub fn conditioned(&self) -> &Conditioned<'a> {
        &self.cond
    }

    pub fn target_design(&self) -> &DVector<f64> {
        &self.target_design
    }

    pub fn batch_noise(&self, n_batch: usize) -> Vec<f64> {
        self.batch_noise_per_point.repeat(n_batch)
    }

    fn terms(&self, x: &[f64], batch: &[Vec<f64>]) -> Result<Terms> {
        let model = self.cond.model;
        let e = model.tasks();
        check_dim("target point", model.input_dim(), x.len())?;
        for p in batch {
            check_dim("batch point", model.input_dim(), p.len())?;
        }
        let kern = &self.cond.kernel;
        let train = self.cond.data.points();
        let xs = [x];
        let k_1x = kern.cross_cov(train, &xs);
        let k_12 = kern.cross_cov(train, batch);
        let mut q1 = kern.cross_cov(&xs, &xs);
        let mut b = kern.cross_cov(&xs, batch);
        let mut q21 = kern.cross_cov(batch, batch);
        let (w_x, w_2) = if train.is_empty() {
            (DMatrix::zeros(0, e), DMatrix::zeros(0, batch.len() * e))
        } else {
            let v_x = self.cond.factor.solve_lower(&k_1x);
            let v_2 = self.cond.factor.solve_lower(&k_12);
            q1 -= v_x.tr_mul(&v_x);
            b -= v_x.tr_mul(&v_2);
            q21 -= v_2.tr_mul(&v_2);
            (self.cond.factor.solve(&k_1x), self.cond.factor.solve(&k_12))
        };
        symmetrize(&mut q1);
        let p1 = DVector::from_column_slice(&model.task_means) + k_1x.tr_mul(&self.cond.alpha);

        let (t, f21) = if batch.is_empty() {
            (DMatrix::zeros(e, e), None)
        } else {
            for (i, v) in self.batch_noise(batch.len()).iter().enumerate() {
                q21[(i, i)] += v;
            }
            symmetrize(&mut q21);
            let f21 = SpdFactor::new(&q21, "Q(2|1)")?;
            let v = f21.solve_lower(&b.transpose());
            let mut t = v.tr_mul(&v);
            symmetrize(&mut t);
            (t, Some(f21))
        };
        let m = &q1 - &t;
        let r = &self.target_design - &p1;
        Ok(Terms {
            w_x,
            w_2,
            p1,
            q1,
            b,
            f21,
            t,
            m,
            r,
        })
    }

    /// `p(f|1)`, `Q(f|1)` and `Q(f|1+2) = Q(f|1) - T`, without factoring the latter.
    pub fn updated_covariance(
        &self,
        x: &[f64],
        batch: &[Vec<f64>],
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let tm = self.terms(x, batch)?;
        Ok((tm.p1, tm.q1, tm.m))
    }

    pub fn correction_term(&self, x: &[f64], batch: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        Ok(self.terms(x, batch)?.t)
    }

    pub fn breakdown(&self, x: &[f64], batch: &[Vec<f64>]) -> Result<AcquisitionBreakdown> {
        let tm = self.terms(x, batch)?;
        let e = tm.q1.nrows();
        let fm = SpdFactor::new(&tm.m, "Q(f|1) - T")?;
        let mi = fm.inverse();
        let log_det_term = -0.5 * fm.log_det();
        let data_fit_term = -0.5 * fm.quad_form(&tm.r);
        let trace_term = -0.5 * (&tm.t * &mi).trace();
        let eig_nats = info_gain_compact(&tm.q1, &tm.t, e)?;
        Ok(AcquisitionBreakdown {
            log_det_term,
            data_fit_term,
            trace_term,
            total: log_det_term + data_fit_term + trace_term,
            q_f12: tm.m.clone(),
            t: tm.t,
            q_f1: tm.q1,
            p_f1: tm.p1,
            eig_nats,
        })
    }

    pub fn expected_information_gain(&self, x: &[f64], batch: &[Vec<f64>]) -> Result<f64> {
        let tm = self.terms(x, batch)?;
        info_gain_compact(&tm.q1, &tm.t, tm.q1.nrows())
    }

    /// Value and gradient with respect to `[x, batch₀, batch₁, …]` flattened.
    pub fn value_and_grad(
        &self,
        x: &[f64],
        batch: &[Vec<f64>],
        objective: AcqObjective,
    ) -> Result<(f64, Vec<f64>)> {
        let tm = self.terms(x, batch)?;
        let e = tm.q1.nrows();
        let fm = SpdFactor::new(&tm.m, "Q(f|1) - T")?;
        let mi = fm.inverse();
        let (value, g_q1, g_t, g_p1) = match objective {
            AcqObjective::Tad => {
                let value =
                    -0.5 * fm.log_det() - 0.5 * fm.quad_form(&tm.r) - 0.5 * (&tm.t * &mi).trace();
                // ∂L/∂M = ½ M⁻¹ (r rᵀ + T) M⁻¹, with M = Q1 - T
                let mut inner = &tm.r * tm.r.transpose() + &tm.t;
                symmetrize(&mut inner);
                let g_m = (&mi * inner * &mi) * 0.5;
                let g_q1 = &g_m - &mi * 0.5;
                let g_t = -g_m;
                let g_p1 = &mi * &tm.r;
                (value, g_q1, g_t, g_p1)
            }
            AcqObjective::InformationGain => {
                let value = info_gain_compact(&tm.q1, &tm.t, e)?;
                let fq1 = SpdFactor::new(&tm.q1, "Q(f|1)")?;
                let g_q1 = (fq1.inverse() - &mi) * 0.5;
                let g_t = &mi * 0.5;
                (value, g_q1, g_t, DVector::zeros(e))
            }
        };
        let grad = self.backprop(x, batch, &tm, &g_q1, &g_t, &g_p1);
        Ok((value, grad))
    }

    fn backprop(
        &self,
        x: &[f64],
        batch: &[Vec<f64>],
        tm: &Terms,
        g_q1: &DMatrix<f64>,
        g_t: &DMatrix<f64>,
        g_p1: &DVector<f64>,
    ) -> Vec<f64> {
        let kern = &self.cond.kernel;
        let dim = kern.dim;
        let train = self.cond.data.points();
        let n2 = batch.len();
        let mut grad = vec![0.0; (1 + n2) * dim];
        let xs = [x];
        let x_slot = [Some(0)];
        let batch_slots: Vec<Option<usize>> = (0..n2).map(|m| Some(1 + m)).collect();
        let train_slots = vec![None; train.len()];

        // T = B Q21⁻¹ Bᵀ
        let (g_b, g_q21) = match &tm.f21 {
            Some(f21) => {
                let c = f21.solve(&tm.b.transpose()).transpose();
                let g_b = (g_t * &c) * 2.0;
                let g_q21 = -(c.transpose() * g_t * &c);
                (g_b, g_q21)
            }
            None => (DMatrix::zeros(g_t.nrows(), 0), DMatrix::zeros(0, 0)),
        };

        if !train.is_empty() {
            // p1 = μ + K_x1 α; Q1 = K_xx - K_x1 A⁻¹ K_1x; B = K_x2 - K_x1 A⁻¹ K_12
            let mut g_kx1 = g_p1 * self.cond.alpha.transpose();
            g_kx1 -= (g_q1 * tm.w_x.transpose()) * 2.0;
            if n2 > 0 {
                g_kx1 -= &g_b * tm.w_2.transpose();
            }
            kern.accumulate_point_grads(&xs, &x_slot, train, &train_slots, &g_kx1, &mut grad);
            if n2 > 0 {
                // Q21 = K22 + Σ2 - K_21 A⁻¹ K_12
                let g_k12 = -(&tm.w_x * &g_b) - (&tm.w_2 * &g_q21) * 2.0;
                kern.accumulate_point_grads(
                    train,
                    &train_slots,
                    batch,
                    &batch_slots,
                    &g_k12,
                    &mut grad,
                );
            }
        }
        if n2 > 0 {
            kern.accumulate_point_grads(&xs, &x_slot, batch, &batch_slots, &g_b, &mut grad);
            kern.accumulate_point_grads(
                batch,
                &batch_slots,
                batch,
                &batch_slots,
                &g_q21,
                &mut grad,
            );
        }
        grad
    }

    /// Updated predictive law of `f(x)` after observing `g₂` at `batch`.
    pub fn updated_prediction(
        &self,
        x: &[f64],
        batch: &[Vec<f64>],
        batch_obs: &[f64],
    ) -> Result<NormalDist> {
        let pred1 = self.cond.conditional(&[x], None)?;
        self.cond
            .update(x, &pred1, batch, batch_obs, &self.batch_noise(batch.len()))
    }
}

/// `-½ log det(1 - T Q⁻¹)`, evaluated as `-½ log det(1 - L⁻¹ T L⁻ᵀ)` with `Q = L Lᵀ`.
fn info_gain_compact(q1: &DMatrix<f64>, t: &DMatrix<f64>, e: usize) -> Result<f64> {
    if t.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let fq = SpdFactor::new(q1, "Q(f|1)")?;
    let a = fq.solve_lower(t);
    let mut s = fq.solve_lower(&a.transpose());
    symmetrize(&mut s);
    let reduced = DMatrix::identity(e, e) - s;
    let fr = SpdFactor::new(&reduced, "1 - T Q(f|1)⁻¹")?;
    Ok(-0.5 * fr.log_det())
}

pub fn correction_term(inputs: &AcquisitionInputs<'_>) -> Result<DMatrix<f64>> {
    AcquisitionContext::from_inputs(inputs)?
        .correction_term(&inputs.target_point, &inputs.batch_points)
}

pub fn tad_acquisition(inputs: &AcquisitionInputs<'_>) -> Result<AcquisitionBreakdown> {
    AcquisitionContext::from_inputs(inputs)?.breakdown(&inputs.target_point, &inputs.batch_points)
}

/// Expected information gain in nats (compact form).
pub fn expected_information_gain(inputs: &AcquisitionInputs<'_>) -> Result<f64> {
    AcquisitionContext::from_inputs(inputs)?
        .expected_information_gain(&inputs.target_point, &inputs.batch_points)
}

/// Expected information gain as `½ log[det Q(f|1) / det Q(f|1+2)]`, with
/// `Q(f|1+2)` obtained by conditioning on the stacked `(g₁, g₂)` design at once.
pub fn expected_information_gain_volume_ratio(inputs: &AcquisitionInputs<'_>) -> Result<f64> {
    let x = inputs.target_point.as_slice();
    let q1 = Conditioned::new(inputs.model, inputs.data)?.conditional(&[x], None)?;
    let stacked = stack_dataset(inputs.data, &inputs.batch_points, None, &inputs.batch_noise)?;
    let q12 = Conditioned::new(inputs.model, &stacked)?.conditional(&[x], None)?;
    let l1 = SpdFactor::new(&q1.cov, "Q(f|1)")?.log_det();
    let l12 = SpdFactor::new(&q12.cov, "Q(f|1+2)")?.log_det();
    Ok(0.5 * (l1 - l12))
}

/// `-½ log det Q(f|1+2) - ½ (f_T - p)ᵀ Q(f|1+2)⁻¹ (f_T - p)` after observing
/// `g₂`, by one-shot conditioning on the stacked data (constant omitted).
pub fn predictive_log_likelihood(
    model: &KernelModel,
    data: &Dataset,
    batch_points: &[Vec<f64>],
    batch_obs: &[f64],
    batch_noise: &[f64],
    x: &[f64],
    target_design: &[f64],
) -> Result<f64> {
    check_dim("target design", model.tasks(), target_design.len())?;
    let stacked = stack_dataset(data, batch_points, Some(batch_obs), batch_noise)?;
    let pred = Conditioned::new(model, &stacked)?.conditional(&[x], None)?;
    pred.log_density_unnormalized(&DVector::from_column_slice(target_design))
}

pub(crate) fn stack_dataset(
    data: &Dataset,
    batch_points: &[Vec<f64>],
    batch_obs: Option<&[f64]>,
    batch_noise: &[f64],
) -> Result<Dataset> {
    let e = data.tasks();
    check_dim(
        "batch noise diagonal",
        batch_points.len() * e,
        batch_noise.len(),
    )?;
    let mut stacked = data.clone();
    for (i, p) in batch_points.iter().enumerate() {
        let r = i * e..(i + 1) * e;
        let zeros = vec![0.0; e];
        let obs = match batch_obs {
            Some(o) => {
                check_dim("batch observations", batch_points.len() * e, o.len())?;
                &o[r.clone()]
            }
            None => &zeros[..],
        };
        stacked.push(p.clone(), obs, &batch_noise[r])?;
    }
    Ok(stacked)
}

/// `-strength · Σ_points Σ_d dist_outside²`; zero when every point is in the box.
pub fn domain_penalty(
    x: &[f64],
    batch: &[Vec<f64>],
    lower: &[f64],
    upper: &[f64],
    strength: f64,
) -> f64 {
    std::iter::once(x)
        .chain(batch.iter().map(Vec::as_slice))
        .map(|p| {
            p.iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (lo, hi))| {
                    let out = (lo - v).max(0.0) + (v - hi).max(0.0);
                    out * out
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        * -strength
}

/// Gradient of [`domain_penalty`] in the `[x, batch…]` layout.
pub fn domain_penalty_grad(
    x: &[f64],
    batch: &[Vec<f64>],
    lower: &[f64],
    upper: &[f64],
    strength: f64,
) -> Vec<f64> {
    std::iter::once(x)
        .chain(batch.iter().map(Vec::as_slice))
        .flat_map(|p| {
            p.iter()
                .zip(lower.iter().zip(upper))
                .map(|(v, (lo, hi))| {
                    if v < lo {
                        2.0 * strength * (lo - v)
                    } else if v > hi {
                        -2.0 * strength * (v - hi)
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect()
}
