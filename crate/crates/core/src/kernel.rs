//! Sum-of-separable multitask covariance: `C(x, x') = Σ_l k_l(x, x') κ_l`.
//!
//! Each `k_l` is a squared-exponential kernel with its own signal variance and
//! per-dimension lengthscales; each `κ_l` is an `E×E` symmetric positive
//! definite task matrix carried as its Cholesky factor. Stacked matrices are
//! point-major: row `a*E + i` is task `i` at point `a`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result, TadError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarKernelParams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl ScalarKernelParams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let p = Self {
            signal_variance,
            lengthscales,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.signal_variance > 0.0
            && self.signal_variance.is_finite()
            && !self.lengthscales.is_empty()
            && self.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TadError::ContractViolation(
                "scalar kernel parameters must be finite and strictly positive".into(),
            ))
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Task covariance `κ = L Lᵀ`, with `L` lower triangular and a positive diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMatrixParams {
    chol_factor: DMatrix<f64>,
}

impl TaskMatrixParams {
    pub fn from_cholesky(chol_factor: DMatrix<f64>) -> Result<Self> {
        let p = Self { chol_factor };
        p.validate()?;
        Ok(p)
    }

    /// `scale · I`.
    pub fn scaled_identity(tasks: usize, scale: f64) -> Self {
        Self {
            chol_factor: DMatrix::identity(tasks, tasks) * scale.sqrt(),
        }
    }

    pub fn from_covariance(kappa: &DMatrix<f64>) -> Result<Self> {
        let chol = kappa.clone().cholesky().ok_or_else(|| {
            TadError::ContractViolation("task matrix must be positive definite".into())
        })?;
        Self::from_cholesky(chol.l())
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.chol_factor;
        if l.nrows() != l.ncols() || l.nrows() == 0 {
            return Err(TadError::ContractViolation(
                "task Cholesky factor must be a non-empty square matrix".into(),
            ));
        }
        for i in 0..l.nrows() {
            if !(l[(i, i)] > 0.0) {
                return Err(TadError::ContractViolation(
                    "task Cholesky factor needs a strictly positive diagonal".into(),
                ));
            }
            for j in (i + 1)..l.ncols() {
                if l[(i, j)] != 0.0 {
                    return Err(TadError::ContractViolation(
                        "task Cholesky factor must be lower triangular".into(),
                    ));
                }
            }
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(TadError::ContractViolation("non-finite task factor".into()));
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.chol_factor.nrows()
    }

    pub fn chol_factor(&self) -> &DMatrix<f64> {
        &self.chol_factor
    }

    pub fn kappa(&self) -> DMatrix<f64> {
        &self.chol_factor * self.chol_factor.transpose()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelComponent {
    pub scalar: ScalarKernelParams,
    pub task: TaskMatrixParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub task_means: Vec<f64>,
    pub components: Vec<KernelComponent>,
}

impl KernelModel {
    pub fn new(task_means: Vec<f64>, components: Vec<KernelComponent>) -> Result<Self> {
        let m = Self {
            task_means,
            components,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(TadError::ContractViolation(
                "kernel model needs at least one component".into(),
            ));
        }
        let e = self.task_means.len();
        let d = self.components[0].scalar.dim();
        for c in &self.components {
            c.scalar.validate()?;
            c.task.validate()?;
            check_dim("component task count", e, c.task.tasks())?;
            check_dim("component input dimension", d, c.scalar.dim())?;
        }
        if self.task_means.iter().any(|m| !m.is_finite()) {
            return Err(TadError::ContractViolation("non-finite task mean".into()));
        }
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.task_means.len()
    }

    pub fn input_dim(&self) -> usize {
        self.components[0].scalar.dim()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Length of the unconstrained hyperparameter vector.
    pub fn n_params(&self) -> usize {
        self.tasks() + self.n_components() * self.params_per_component()
    }

    fn params_per_component(&self) -> usize {
        let e = self.tasks();
        1 + self.input_dim() + e * (e + 1) / 2
    }

    /// Unconstrained parameterization: task means, then per component
    /// `ln σ²`, `ln ℓ_d`, and the lower-triangular task factor in row-major
    /// order with its diagonal in log space.
    pub fn to_params(&self) -> Vec<f64> {
        let mut v = self.task_means.clone();
        for c in &self.components {
            v.push(c.scalar.signal_variance.ln());
            v.extend(c.scalar.lengthscales.iter().map(|l| l.ln()));
            let l = c.task.chol_factor();
            for i in 0..l.nrows() {
                for j in 0..=i {
                    v.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                }
            }
        }
        v
    }

    /// Inverse of [`Self::to_params`], keeping this model's shape.
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        check_dim("hyperparameter vector", self.n_params(), params.len())?;
        let e = self.tasks();
        let d = self.input_dim();
        let mut it = params.iter().copied();
        let task_means: Vec<f64> = it.by_ref().take(e).collect();
        let mut components = Vec::with_capacity(self.n_components());
        for _ in 0..self.n_components() {
            let signal_variance = it.next().unwrap_or(0.0).exp();
            let lengthscales = it.by_ref().take(d).map(f64::exp).collect();
            let mut l = DMatrix::zeros(e, e);
            for i in 0..e {
                for j in 0..=i {
                    let v = it.next().unwrap_or(0.0);
                    l[(i, j)] = if i == j { v.exp() } else { v };
                }
            }
            components.push(KernelComponent {
                scalar: ScalarKernelParams {
                    signal_variance,
                    lengthscales,
                },
                task: TaskMatrixParams { chol_factor: l },
            });
        }
        Self::new(task_means, components)
    }

    /// Stacked prior mean for `n` points.
    pub fn stacked_mean(&self, n: usize) -> nalgebra::DVector<f64> {
        let e = self.tasks();
        nalgebra::DVector::from_fn(n * e, |r, _| self.task_means[r % e])
    }

    pub(crate) fn prepared(&self) -> PreparedKernel {
        PreparedKernel {
            comps: self
                .components
                .iter()
                .map(|c| PreparedComponent {
                    variance: c.scalar.signal_variance,
                    inv_sq_len: c
                        .scalar
                        .lengthscales
                        .iter()
                        .map(|l| 1.0 / (l * l))
                        .collect(),
                    kappa: c.task.kappa(),
                })
                .collect(),
            tasks: self.tasks(),
            dim: self.input_dim(),
        }
    }
}

pub(crate) struct PreparedComponent {
    pub variance: f64,
    pub inv_sq_len: Vec<f64>,
    pub kappa: DMatrix<f64>,
}

/// Kernel with derived quantities cached for assembly loops.
pub(crate) struct PreparedKernel {
    pub comps: Vec<PreparedComponent>,
    pub tasks: usize,
    pub dim: usize,
}

impl PreparedKernel {
    #[inline]
    pub fn scalar(&self, c: &PreparedComponent, a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for d in 0..self.dim {
            let diff = a[d] - b[d];
            s += diff * diff * c.inv_sq_len[d];
        }
        c.variance * (-0.5 * s).exp()
    }

    pub fn cross_cov<P: AsRef<[f64]>, Q: AsRef<[f64]>>(&self, a: &[P], b: &[Q]) -> DMatrix<f64> {
        let e = self.tasks;
        let mut out = DMatrix::zeros(a.len() * e, b.len() * e);
        for (ib, pb) in b.iter().enumerate() {
            for (ia, pa) in a.iter().enumerate() {
                for c in &self.comps {
                    let k = self.scalar(c, pa.as_ref(), pb.as_ref());
                    for j in 0..e {
                        for i in 0..e {
                            out[(ia * e + i, ib * e + j)] += k * c.kappa[(i, j)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Adds `∂⟨G, K(A,B)⟩/∂(point coordinates)` into `out`.
    ///
    /// `a_slots[ia]` / `b_slots[ib]` give the gradient slot of each point, or
    /// `None` for points held fixed. `out` is laid out slot-major, `dim` wide.
    pub fn accumulate_point_grads<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
        &self,
        a: &[P],
        a_slots: &[Option<usize>],
        b: &[Q],
        b_slots: &[Option<usize>],
        g: &DMatrix<f64>,
        out: &mut [f64],
    ) {
        let e = self.tasks;
        let dim = self.dim;
        for (ib, pb) in b.iter().enumerate() {
            let pb = pb.as_ref();
            for (ia, pa) in a.iter().enumerate() {
                if a_slots[ia].is_none() && b_slots[ib].is_none() {
                    continue;
                }
                let pa = pa.as_ref();
                for c in &self.comps {
                    let mut inner = 0.0;
                    for j in 0..e {
                        for i in 0..e {
                            inner += c.kappa[(i, j)] * g[(ia * e + i, ib * e + j)];
                        }
                    }
                    if inner == 0.0 {
                        continue;
                    }
                    let w = self.scalar(c, pa, pb) * inner;
                    for d in 0..dim {
                        // ∂k/∂a_d = -k (a_d - b_d)/ℓ_d², ∂k/∂b_d = +k (a_d - b_d)/ℓ_d²
                        let t = w * (pa[d] - pb[d]) * c.inv_sq_len[d];
                        if let Some(s) = a_slots[ia] {
                            out[s * dim + d] -= t;
                        }
                        if let Some(s) = b_slots[ib] {
                            out[s * dim + d] += t;
                        }
                    }
                }
            }
        }
    }
}

/// Squared-exponential kernel `σ² exp(-½ Σ_d ((a_d - b_d)/ℓ_d)²)`.
pub fn eval_scalar_kernel(a: &[f64], b: &[f64], params: &ScalarKernelParams) -> Result<f64> {
    check_dim("kernel first argument", params.dim(), a.len())?;
    check_dim("kernel second argument", params.dim(), b.len())?;
    let s: f64 = a
        .iter()
        .zip(b)
        .zip(&params.lengthscales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    Ok(params.signal_variance * (-0.5 * s).exp())
}

/// Stacked cross-covariance `C(A, B)` of shape `(|A|·E) × (|B|·E)`.
pub fn assemble_cross_cov<P: AsRef<[f64]>, Q: AsRef<[f64]>>(
    a: &[P],
    b: &[Q],
    model: &KernelModel,
) -> Result<DMatrix<f64>> {
    let d = model.input_dim();
    for p in a {
        check_dim("cross-covariance point", d, p.as_ref().len())?;
    }
    for p in b {
        check_dim("cross-covariance point", d, p.as_ref().len())?;
    }
    Ok(model.prepared().cross_cov(a, b))
}

/// Gradient of `⟨G, K(X, X)⟩` with respect to the kernel part of the
/// hyperparameter vector (everything after the task means), for symmetric `G`.
pub(crate) fn kernel_hyper_grads<P: AsRef<[f64]>>(
    model: &KernelModel,
    pts: &[P],
    g: &DMatrix<f64>,
) -> Vec<f64> {
    let e = model.tasks();
    let dim = model.input_dim();
    let prepared = model.prepared();
    let mut out = Vec::with_capacity(model.n_params() - e);
    for (comp, pc) in model.components.iter().zip(&prepared.comps) {
        let mut d_logvar = 0.0;
        let mut d_loglen = vec![0.0; dim];
        let mut g_kappa = DMatrix::<f64>::zeros(e, e);
        for (ib, pb) in pts.iter().enumerate() {
            let pb = pb.as_ref();
            for (ia, pa) in pts.iter().enumerate() {
                let pa = pa.as_ref();
                let k = prepared.scalar(pc, pa, pb);
                if k == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for j in 0..e {
                    for i in 0..e {
                        let gij = g[(ia * e + i, ib * e + j)];
                        inner += pc.kappa[(i, j)] * gij;
                        g_kappa[(i, j)] += k * gij;
                    }
                }
                let w = k * inner;
                d_logvar += w;
                for d in 0..dim {
                    let diff = pa[d] - pb[d];
                    d_loglen[d] += w * diff * diff * pc.inv_sq_len[d];
                }
            }
        }
        out.push(d_logvar);
        out.extend(d_loglen);
        // κ = L Lᵀ ⇒ ∂/∂L = (G_κ + G_κᵀ) L
        let l = comp.task.chol_factor();
        let g_l = (&g_kappa + g_kappa.transpose()) * l;
        for i in 0..e {
            for j in 0..=i {
                out.push(if i == j {
                    g_l[(i, i)] * l[(i, i)]
                } else {
                    g_l[(i, j)]
                });
            }
        }
    }
    out
}
