//! Vector-valued GP conditioning: marginal likelihood, predictive
//! distributions, and the update from `f | g₁` to `f | (g₁, g₂)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TadError};
use crate::kernel::{kernel_hyper_grads, KernelModel, PreparedKernel};
use crate::linalg::{symmetrize, SpdFactor};

/// Acquired control points with their stacked observations and diagonal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    tasks: usize,
    points: Vec<Vec<f64>>,
    observations: Vec<f64>,
    noise_var: Vec<f64>,
}

impl Dataset {
    pub fn empty(tasks: usize) -> Self {
        Self {
            tasks,
            points: Vec::new(),
            observations: Vec::new(),
            noise_var: Vec::new(),
        }
    }

    pub fn new(
        tasks: usize,
        points: Vec<Vec<f64>>,
        observations: Vec<f64>,
        noise_var: Vec<f64>,
    ) -> Result<Self> {
        let mut d = Self::empty(tasks);
        check_dim(
            "dataset observations",
            points.len() * tasks,
            observations.len(),
        )?;
        check_dim(
            "dataset noise diagonal",
            points.len() * tasks,
            noise_var.len(),
        )?;
        for (i, p) in points.into_iter().enumerate() {
            let r = i * tasks..(i + 1) * tasks;
            d.push(p, &observations[r.clone()], &noise_var[r])?;
        }
        Ok(d)
    }

    pub fn push(&mut self, point: Vec<f64>, observation: &[f64], noise_var: &[f64]) -> Result<()> {
        check_dim("observation width", self.tasks, observation.len())?;
        check_dim("noise width", self.tasks, noise_var.len())?;
        if let Some(first) = self.points.first() {
            check_dim("point dimension", first.len(), point.len())?;
        }
        if noise_var.iter().any(|v| !(*v >= 0.0)) {
            return Err(TadError::ContractViolation(
                "noise variances must be non-negative".into(),
            ));
        }
        if observation
            .iter()
            .chain(point.iter())
            .any(|v| !v.is_finite())
        {
            return Err(TadError::ContractViolation(
                "points and observations must be finite".into(),
            ));
        }
        self.points.push(point);
        self.observations.extend_from_slice(observation);
        self.noise_var.extend_from_slice(noise_var);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.tasks..(i + 1) * self.tasks]
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    /// Indices of points lying outside the box `[lower, upper]`.
    pub fn outside_box(&self, lower: &[f64], upper: &[f64]) -> Vec<usize> {
        self.points
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                p.iter()
                    .zip(lower.iter().zip(upper))
                    .any(|(v, (lo, hi))| v < lo || v > hi)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl NormalDist {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density without the `-(n/2) ln 2π` constant.
    pub fn log_density_unnormalized(&self, v: &DVector<f64>) -> Result<f64> {
        check_dim("normal log-density argument", self.dim(), v.len())?;
        let f = SpdFactor::new(&self.cov, "normal log-density")?;
        let r = v - &self.mean;
        Ok(-0.5 * f.log_det() - 0.5 * f.quad_form(&r))
    }
}

/// Every covariance block of the joint law of `(f(x), g₁, g₂)`.
#[derive(Debug, Clone)]
pub struct GramBlocks {
    pub k_xx: DMatrix<f64>,
    pub k_x1: DMatrix<f64>,
    pub k_x2: DMatrix<f64>,
    pub k_11: DMatrix<f64>,
    pub k_12: DMatrix<f64>,
    pub k_22: DMatrix<f64>,
}

impl GramBlocks {
    pub fn assemble(
        model: &KernelModel,
        x: &[f64],
        x1: &[Vec<f64>],
        x2: &[Vec<f64>],
    ) -> Result<Self> {
        check_dim("target point", model.input_dim(), x.len())?;
        let k = model.prepared();
        let xs = [x];
        Ok(Self {
            k_xx: k.cross_cov(&xs, &xs),
            k_x1: k.cross_cov(&xs, x1),
            k_x2: k.cross_cov(&xs, x2),
            k_11: k.cross_cov(x1, x1),
            k_12: k.cross_cov(x1, x2),
            k_22: k.cross_cov(x2, x2),
        })
    }

    /// The full covariance `Γ` with noise added on the `g₁`, `g₂` diagonal blocks.
    pub fn joint_covariance(&self, noise1: &[f64], noise2: &[f64]) -> DMatrix<f64> {
        let e = self.k_xx.nrows();
        let n1 = self.k_11.nrows();
        let n2 = self.k_22.nrows();
        let n = e + n1 + n2;
        let mut g = DMatrix::zeros(n, n);
        g.view_mut((0, 0), (e, e)).copy_from(&self.k_xx);
        g.view_mut((0, e), (e, n1)).copy_from(&self.k_x1);
        g.view_mut((0, e + n1), (e, n2)).copy_from(&self.k_x2);
        g.view_mut((e, 0), (n1, e))
            .copy_from(&self.k_x1.transpose());
        g.view_mut((e, e), (n1, n1)).copy_from(&self.k_11);
        g.view_mut((e, e + n1), (n1, n2)).copy_from(&self.k_12);
        g.view_mut((e + n1, 0), (n2, e))
            .copy_from(&self.k_x2.transpose());
        g.view_mut((e + n1, e), (n2, n1))
            .copy_from(&self.k_12.transpose());
        g.view_mut((e + n1, e + n1), (n2, n2)).copy_from(&self.k_22);
        for (i, v) in noise1.iter().enumerate() {
            g[(e + i, e + i)] += v;
        }
        for (i, v) in noise2.iter().enumerate() {
            g[(e + n1 + i, e + n1 + i)] += v;
        }
        g
    }
}

/// A model conditioned on a dataset: `K₁₁ + Σ₁` factored once, `α = (K₁₁+Σ₁)⁻¹(g₁-μ₁)`.
pub struct Conditioned<'a> {
    pub(crate) model: &'a KernelModel,
    pub(crate) kernel: PreparedKernel,
    pub(crate) data: &'a Dataset,
    pub(crate) factor: SpdFactor,
    pub(crate) alpha: DVector<f64>,
    pub(crate) residual: DVector<f64>,
}

impl<'a> Conditioned<'a> {
    pub fn new(model: &'a KernelModel, data: &'a Dataset) -> Result<Self> {
        model.validate()?;
        check_dim("dataset tasks", model.tasks(), data.tasks())?;
        if let Some(p) = data.points().first() {
            check_dim("dataset point dimension", model.input_dim(), p.len())?;
        }
        let kernel = model.prepared();
        let mut a = kernel.cross_cov(data.points(), data.points());
        for (i, v) in data.noise_var().iter().enumerate() {
            a[(i, i)] += v;
        }
        let factor = SpdFactor::new(&a, "K11 + Σ1")?;
        let residual =
            DVector::from_column_slice(data.observations()) - model.stacked_mean(data.len());
        let alpha = factor.solve_vec(&residual);
        Ok(Self {
            model,
            kernel,
            data,
            factor,
            alpha,
            residual,
        })
    }

    pub fn model(&self) -> &KernelModel {
        self.model
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    /// `(g₁-μ₁)ᵀ (K₁₁+Σ₁)⁻¹ (g₁-μ₁)`.
    pub fn residual_quad_form(&self) -> f64 {
        self.factor.quad_form(&self.residual)
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.residual.len() as f64;
        -0.5 * n * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * self.factor.log_det()
            - 0.5 * self.residual_quad_form()
    }

    /// Law of `f(z)` (plus optional diagonal noise) at the points `z`, given `g₁`.
    pub fn conditional<P: AsRef<[f64]>>(
        &self,
        z: &[P],
        noise: Option<&[f64]>,
    ) -> Result<NormalDist> {
        let e = self.model.tasks();
        for p in z {
            check_dim("prediction point", self.model.input_dim(), p.as_ref().len())?;
        }
        if let Some(n) = noise {
            check_dim("prediction noise diagonal", z.len() * e, n.len())?;
        }
        let k_1z = self.kernel.cross_cov(self.data.points(), z);
        let mut cov = self.kernel.cross_cov(z, z);
        if !self.data.is_empty() {
            let v = self.factor.solve_lower(&k_1z);
            cov -= v.tr_mul(&v);
        }
        if let Some(n) = noise {
            for (i, v) in n.iter().enumerate() {
                cov[(i, i)] += v;
            }
        }
        symmetrize(&mut cov);
        let mean = self.model.stacked_mean(z.len()) + k_1z.tr_mul(&self.alpha);
        Ok(NormalDist { mean, cov })
    }

    /// `T`-style update from `f(x) | g₁` to `f(x) | (g₁, g₂)`.
    pub fn update(
        &self,
        x: &[f64],
        pred1: &NormalDist,
        batch_points: &[Vec<f64>],
        batch_obs: &[f64],
        batch_noise: &[f64],
    ) -> Result<NormalDist> {
        let e = self.model.tasks();
        check_dim("prediction-update prior", e, pred1.dim())?;
        check_dim(
            "batch observations",
            batch_points.len() * e,
            batch_obs.len(),
        )?;
        check_dim(
            "batch noise diagonal",
            batch_points.len() * e,
            batch_noise.len(),
        )?;
        if batch_points.is_empty() {
            return Ok(pred1.clone());
        }
        let xs = [x];
        let k_1x = self.kernel.cross_cov(self.data.points(), &xs);
        let k_12 = self.kernel.cross_cov(self.data.points(), batch_points);
        let mut b = self.kernel.cross_cov(&xs, batch_points);
        let mut q21 = self.kernel.cross_cov(batch_points, batch_points);
        if !self.data.is_empty() {
            let vx = self.factor.solve_lower(&k_1x);
            let v2 = self.factor.solve_lower(&k_12);
            b -= vx.tr_mul(&v2);
            q21 -= v2.tr_mul(&v2);
        }
        for (i, v) in batch_noise.iter().enumerate() {
            q21[(i, i)] += v;
        }
        let f21 = SpdFactor::new(&q21, "Q(2|1)")?;
        let p21 = self.model.stacked_mean(batch_points.len()) + k_12.tr_mul(&self.alpha);
        let innovation = DVector::from_column_slice(batch_obs) - p21;
        let mean = &pred1.mean + &b * f21.solve_vec(&innovation);
        let mut cov = &pred1.cov - &b * f21.solve(&b.transpose());
        symmetrize(&mut cov);
        Ok(NormalDist { mean, cov })
    }
}

pub fn marginal_log_likelihood(model: &KernelModel, data: &Dataset) -> Result<f64> {
    Ok(Conditioned::new(model, data)?.log_marginal_likelihood())
}

/// Marginal log-likelihood and its gradient with respect to
/// [`KernelModel::to_params`].
pub fn marginal_log_likelihood_with_grad(
    model: &KernelModel,
    data: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    let cond = Conditioned::new(model, data)?;
    let value = cond.log_marginal_likelihood();
    let e = model.tasks();
    let alpha = &cond.alpha;
    // ∂L/∂K = ½(ααᵀ - (K+Σ)⁻¹)
    let mut g = cond.factor.inverse();
    g.ger(0.5, alpha, alpha, -0.5);
    let mut grad = vec![0.0; e];
    for (r, a) in alpha.iter().enumerate() {
        grad[r % e] += a;
    }
    grad.extend(kernel_hyper_grads(model, data.points(), &g));
    Ok((value, grad))
}

pub fn predictive_given_1(model: &KernelModel, data: &Dataset, x: &[f64]) -> Result<NormalDist> {
    Conditioned::new(model, data)?.conditional(&[x], None)
}

/// Law of `g₂ | g₁`; with an empty dataset this is the prior `N(μ₂, K₂₂ + Σ₂)`.
pub fn data_predictive(
    model: &KernelModel,
    data: &Dataset,
    batch_points: &[Vec<f64>],
    batch_noise: &[f64],
) -> Result<NormalDist> {
    if batch_points.is_empty() {
        return Err(TadError::ContractViolation(
            "data predictive needs a non-empty batch".into(),
        ));
    }
    Conditioned::new(model, data)?.conditional(batch_points, Some(batch_noise))
}

pub fn prediction_update(
    pred1: &NormalDist,
    x: &[f64],
    data: &Dataset,
    batch_points: &[Vec<f64>],
    batch_obs: &[f64],
    batch_noise: &[f64],
    model: &KernelModel,
) -> Result<NormalDist> {
    Conditioned::new(model, data)?.update(x, pred1, batch_points, batch_obs, batch_noise)
}
