//! Quasi-Newton maximizers for the hyperparameter and TAD problems, and a
//! finite-difference gradient checker.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    domain_penalty, domain_penalty_grad, AcqObjective, AcquisitionBreakdown, AcquisitionContext,
};
use crate::error::{check_dim, Result, TadError};
use crate::gp::{marginal_log_likelihood_with_grad, Conditioned, Dataset};
use crate::kernel::KernelModel;
use crate::par;
use crate::validation::training_fit_conditioned;

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub restarts: usize,
    pub early_stop_p_band: (f64, f64),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            step_tol: 1e-9,
            restarts: 4,
            early_stop_p_band: (0.01, 0.99),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.early_stop_p_band;
        if self.max_iters == 0
            || !(self.grad_tol > 0.0)
            || !(self.step_tol > 0.0)
            || !(0.0..=1.0).contains(&lo)
            || !(0.0..=1.0).contains(&hi)
            || lo > hi
        {
            return Err(TadError::ContractViolation(format!(
                "invalid optimizer configuration {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iters: usize,
    pub restarts_used: usize,
}

/// Outcome of a single local ascent.
#[derive(Debug, Clone)]
pub struct LocalAscent {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS ascent with Armijo backtracking.
///
/// `f` returns `None` where the objective is undefined (e.g. a failed
/// factorization); such trial points are treated as rejected steps.
/// `early_stop` is consulted at every iterate.
pub fn bfgs_maximize<F, S>(
    f: F,
    x0: &[f64],
    cfg: &OptimizerConfig,
    max_step: f64,
    early_stop: S,
) -> Result<LocalAscent>
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    S: Fn(&[f64], f64, &[f64]) -> bool,
{
    let n = x0.len();
    let (mut fx, mut g) = f(x0).ok_or_else(|| TadError::OptimizationFailure {
        attempts: 1,
        reason: "objective undefined at the initializer".into(),
    })?;
    let mut x = x0.to_vec();
    // inverse Hessian approximation of the negated objective, row-major
    let mut h = identity(n);
    let mut scaled = false;
    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters {
        if norm_inf(&g) < cfg.grad_tol || early_stop(&x, fx, &g) {
            converged = true;
            break;
        }
        // ascent direction d = H g
        let mut d = mat_vec(&h, &g, n);
        let mut slope = dot(&g, &d);
        if !(slope > 0.0) {
            h = identity(n);
            scaled = false;
            d = g.clone();
            slope = dot(&g, &d);
        }
        let d_norm = norm_inf(&d);
        let mut t = if d_norm > max_step {
            max_step / d_norm
        } else {
            1.0
        };
        if !scaled {
            t = t.min(1.0 / norm_inf(&g).max(1e-300));
        }
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft >= fx + ARMIJO_C1 * t * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        iters += 1;
        let Some((x_new, f_new, g_new)) = accepted else {
            if scaled {
                // retry once along the plain gradient
                h = identity(n);
                scaled = false;
                continue;
            }
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        // y for the negated objective
        let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let small_step = norm_inf(&s) < cfg.step_tol * (1.0 + norm_inf(&x));
        let small_change = (f_new - fx).abs() <= cfg.step_tol * (1.0 + fx.abs());
        x = x_new;
        fx = f_new;
        g = g_new;
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                scaled = true;
            }
            bfgs_update(&mut h, &s, &y, sy, n);
        }
        if small_step || small_change {
            converged = true;
            break;
        }
    }
    Ok(LocalAscent {
        x,
        value: fx,
        grad: g,
        converged,
        iters,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn mat_vec(h: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&h[i * n..(i + 1) * n], v)).collect()
}

/// `H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y, n);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] +=
                -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Maximizes the marginal log-likelihood over all hyperparameters.
///
/// Restart 0 starts at `init`; further restarts jitter its log-scale
/// parameters. The best restart wins, ties going to the lowest index.
pub fn maximize_gp_hyperparams(
    data: &Dataset,
    init: &KernelModel,
    cfg: &OptimizerConfig,
    lengthscale_bounds: Option<&[(f64, f64)]>,
    seed: u64,
) -> Result<(KernelModel, OptResult)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TadError::ContractViolation(
            "hyperparameter fit needs a non-empty dataset".into(),
        ));
    }
    let e = init.tasks();
    let d = init.input_dim();
    let per_comp = 1 + d + e * (e + 1) / 2;
    let map = match lengthscale_bounds {
        None => BoxMap::default(),
        Some(b) => {
            check_dim("lengthscale bounds", d, b.len())?;
            if b.iter()
                .any(|&(lo, hi)| !(lo > 0.0) || !(hi >= lo) || !hi.is_finite())
            {
                return Err(TadError::ContractViolation(format!(
                    "lengthscale bounds must satisfy 0 < lo <= hi < inf, got {b:?}"
                )));
            }
            let slots = (0..init.n_components())
                .flat_map(|c| {
                    (0..d).map(move |j| (e + c * per_comp + 1 + j, b[j].0.ln(), b[j].1.ln()))
                })
                .collect();
            BoxMap { slots }
        }
    };

    let objective = |u: &[f64]| -> Option<(f64, Vec<f64>)> {
        let m = init.with_params(&map.to_model(u)).ok()?;
        let (v, mut g) = marginal_log_likelihood_with_grad(&m, data).ok()?;
        map.chain(u, &mut g);
        (v.is_finite() && g.iter().all(|x| x.is_finite())).then_some((v, g))
    };
    let (band_lo, band_hi) = cfg.early_stop_p_band;
    let early_stop = |u: &[f64], _v: f64, g: &[f64]| -> bool {
        if norm_inf(g) >= 10.0 * cfg.grad_tol {
            return false;
        }
        let Ok(m) = init.with_params(&map.to_model(u)) else {
            return false;
        };
        let Ok(cond) = Conditioned::new(&m, data) else {
            return false;
        };
        training_fit_conditioned(&cond)
            .map(|r| r.p_value >= band_lo && r.p_value <= band_hi)
            .unwrap_or(false)
    };

    let p_init = init.to_params();
    let u0 = map.to_free(&p_init);
    let (v0, g0) = objective(&u0).ok_or_else(|| TadError::OptimizationFailure {
        attempts: 1,
        reason: "marginal likelihood undefined at the initial hyperparameters".into(),
    })?;
    if norm_inf(&g0) < cfg.grad_tol {
        let p0 = map.to_model(&u0);
        return Ok((
            init.with_params(&p0)?,
            OptResult {
                argmax: p0,
                value: v0,
                converged: true,
                iters: 0,
                restarts_used: 0,
            },
        ));
    }

    let starts: Vec<Vec<f64>> = (0..=cfg.restarts)
        .map(|k| {
            if k == 0 {
                return u0.clone();
            }
            let mut rng = restart_rng(seed, k);
            let jitter = Normal::new(0.0, 0.5).expect("finite std");
            let mut p = p_init.clone();
            for c in 0..init.n_components() {
                let base = e + c * per_comp;
                for v in &mut p[base..base + 1 + d] {
                    *v += jitter.sample(&mut rng);
                }
            }
            map.to_free(&p)
        })
        .collect();
    let runs = par::map_indexed(starts.len(), |k| {
        bfgs_maximize(objective, &starts[k], cfg, 2.0, early_stop)
    });
    let (_, best) = pick_best(runs)?;
    let init_value = marginal_log_likelihood_with_grad(init, data)
        .map(|(v, _)| v)
        .ok();
    if init_value.is_some_and(|v| v > best.value) {
        return Ok((
            init.clone(),
            OptResult {
                argmax: p_init,
                value: init_value.unwrap_or(best.value),
                converged: false,
                iters: best.iters,
                restarts_used: cfg.restarts,
            },
        ));
    }
    let argmax = map.to_model(&best.x);
    let model = init.with_params(&argmax)?;
    Ok((
        model,
        OptResult {
            argmax,
            value: best.value,
            converged: best.converged,
            iters: best.iters,
            restarts_used: cfg.restarts,
        },
    ))
}

/// Logistic map of selected coordinates onto `[lo, hi]`; other coordinates pass through.
#[derive(Default)]
struct BoxMap {
    slots: Vec<(usize, f64, f64)>,
}

impl BoxMap {
    const EDGE: f64 = 1e-9;

    fn to_free(&self, p: &[f64]) -> Vec<f64> {
        let mut u = p.to_vec();
        for &(i, lo, hi) in &self.slots {
            u[i] = if hi > lo {
                let f = ((p[i] - lo) / (hi - lo)).clamp(Self::EDGE, 1.0 - Self::EDGE);
                (f / (1.0 - f)).ln()
            } else {
                0.0
            };
        }
        u
    }

    fn to_model(&self, u: &[f64]) -> Vec<f64> {
        let mut p = u.to_vec();
        for &(i, lo, hi) in &self.slots {
            p[i] = lo + (hi - lo) * sigmoid(u[i]);
        }
        p
    }

    fn chain(&self, u: &[f64], g: &mut [f64]) {
        for &(i, lo, hi) in &self.slots {
            let s = sigmoid(u[i]);
            g[i] *= (hi - lo) * s * (1.0 - s);
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let z = t.exp();
        z / (1.0 + z)
    }
}

fn restart_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

fn pick_best(runs: Vec<Result<LocalAscent>>) -> Result<(usize, LocalAscent)> {
    let attempts = runs.len();
    let mut best: Option<(usize, LocalAscent)> = None;
    let mut last_err = None;
    for (k, r) in runs.into_iter().enumerate() {
        match r {
            Ok(a) => {
                if best.as_ref().is_none_or(|(_, b)| a.value > b.value) {
                    best = Some((k, a));
                }
            }
            Err(e) => last_err = Some(e.to_string()),
        }
    }
    best.ok_or_else(|| TadError::OptimizationFailure {
        attempts,
        reason: last_err.unwrap_or_default(),
    })
}

/// The TAD optimization problem: acquisition plus domain penalty.
pub struct TadProblem<'a> {
    pub ctx: AcquisitionContext<'a>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub penalty_strength: f64,
}

#[derive(Debug, Clone)]
pub struct TadOptimum {
    pub x: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
    pub breakdown: AcquisitionBreakdown,
    /// Acquisition plus domain penalty at the optimum.
    pub objective: f64,
    pub result: OptResult,
}

impl TadProblem<'_> {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn flatten(x: &[f64], batch: &[Vec<f64>]) -> Vec<f64> {
        let mut v = x.to_vec();
        for p in batch {
            v.extend_from_slice(p);
        }
        v
    }

    pub fn unflatten(&self, v: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let d = self.dim();
        let x = v[..d].to_vec();
        let batch = v[d..].chunks(d).map(<[f64]>::to_vec).collect();
        (x, batch)
    }

    /// Penalized TAD objective and gradient in the flattened layout.
    pub fn objective(&self, v: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (x, batch) = self.unflatten(v);
        let (value, mut grad) = self.ctx.value_and_grad(&x, &batch, AcqObjective::Tad)?;
        let pen = domain_penalty(&x, &batch, &self.lower, &self.upper, self.penalty_strength);
        let pen_grad =
            domain_penalty_grad(&x, &batch, &self.lower, &self.upper, self.penalty_strength);
        for (g, p) in grad.iter_mut().zip(pen_grad) {
            *g += p;
        }
        let total = value + pen;
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TadError::NonFinite);
        }
        Ok((total, grad))
    }
}

/// Jointly maximizes the penalized TAD objective over `x` and the batch.
///
/// Restart 0 starts at the given initializers. Restart `k ≥ 1` draws the
/// target uniformly over the box and carries the batch along as a rigid
/// offset cloud, clipped to the box.
pub fn maximize_tad(
    problem: &TadProblem<'_>,
    x_init: &[f64],
    batch_init: &[Vec<f64>],
    cfg: &OptimizerConfig,
    seed: u64,
) -> Result<TadOptimum> {
    cfg.validate()?;
    let d = problem.dim();
    check_dim("target initializer", d, x_init.len())?;
    for p in batch_init {
        check_dim("batch initializer", d, p.len())?;
    }
    let width = problem
        .lower
        .iter()
        .zip(&problem.upper)
        .fold(0.0f64, |m, (l, u)| m.max(u - l));
    let starts: Vec<Vec<f64>> = (0..=cfg.restarts)
        .map(|k| {
            if k == 0 {
                return TadProblem::flatten(x_init, batch_init);
            }
            let mut rng = restart_rng(seed, k);
            let x: Vec<f64> = problem
                .lower
                .iter()
                .zip(&problem.upper)
                .map(|(l, u)| {
                    Uniform::new_inclusive(*l, *u)
                        .expect("ordered box")
                        .sample(&mut rng)
                })
                .collect();
            let batch: Vec<Vec<f64>> = batch_init
                .iter()
                .map(|p| {
                    (0..d)
                        .map(|i| {
                            (x[i] + p[i] - x_init[i]).clamp(problem.lower[i], problem.upper[i])
                        })
                        .collect()
                })
                .collect();
            TadProblem::flatten(&x, &batch)
        })
        .collect();
    let f = |v: &[f64]| problem.objective(v).ok();
    let runs = par::map_indexed(starts.len(), |k| {
        bfgs_maximize(f, &starts[k], cfg, 0.25 * width, |_, _, _| false)
    });
    let (_, best) = pick_best(runs)?;
    let (x, batch) = problem.unflatten(&best.x);
    let breakdown = problem.ctx.breakdown(&x, &batch)?;
    Ok(TadOptimum {
        x,
        batch,
        breakdown,
        objective: best.value,
        result: OptResult {
            argmax: best.x,
            value: best.value,
            converged: best.converged,
            iters: best.iters,
            restarts_used: cfg.restarts,
        },
    })
}

/// Max relative error between the analytic gradient and central differences
/// with step `1e-5·(1+|xᵢ|)`.
///
/// The error of coordinate `i` is `|aᵢ - nᵢ| / max(|nᵢ|, 1e-2·‖n‖∞, 1e-6)`.
pub fn gradient_check<F>(objective: F, point: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (v0, analytic) = objective(point)?;
    if !v0.is_finite() {
        return Err(TadError::NonFinite);
    }
    check_dim("analytic gradient", point.len(), analytic.len())?;
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        let h = 1e-5 * (1.0 + point[i].abs());
        probe[i] = point[i] + h;
        let (fp, _) = objective(&probe)?;
        probe[i] = point[i] - h;
        let (fm, _) = objective(&probe)?;
        probe[i] = point[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TadError::NonFinite);
        }
        numeric.push((fp - fm) / (2.0 * h));
    }
    let scale = norm_inf(&numeric);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-2 * scale).max(1e-6))
        .fold(0.0, f64::max))
}
