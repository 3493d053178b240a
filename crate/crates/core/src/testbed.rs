//! Two-dimensional benchmark function, a noisy simulated oracle, and
//! brute-force reference computations used to cross-check the fast paths.
//!
//! The reference computations deliberately avoid [`crate::linalg`] and the
//! block update formulas: they assemble the full joint covariance and use
//! nalgebra's own Cholesky decomposition.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::acquisition::{AcquisitionContext, AcquisitionInputs};
use crate::campaign::{CampaignSettings, ConvergenceConfig, Oracle, ProblemSpec};
use crate::error::{check_dim, Result, TadError};
use crate::gp::{Dataset, NormalDist};
use crate::kernel::{
    assemble_cross_cov, KernelComponent, KernelModel, ScalarKernelParams, TaskMatrixParams,
};
use crate::par;

pub const TEST_LOWER: [f64; 2] = [-3.0, -3.0];
pub const TEST_UPPER: [f64; 2] = [3.0, 3.0];

/// Evaluates the two-component benchmark response at `d = (d₁, d₂)`.
pub fn eval_test_function(d: &[f64]) -> [f64; 2] {
    let (d1, d2) = (d[0], d[1]);
    let lin = 0.5 * (2.0 * d1 + d2);
    let v1 = 3.0 * (1.0 - d1).powi(2) * (-d1 * d1 - (d2 + 1.0).powi(2)).exp()
        - 10.0 * (d1 / 5.0 - d1.powi(3) - d2.powi(5)) * (-d1 * d1 - d2 * d2).exp()
        - 3.0 * (-(d1 + 2.0).powi(2) - d2 * d2).exp()
        + lin;
    let v2 = 3.0 * (1.0 + d2).powi(2) * (-d2 * d2 - (d1 + 1.0).powi(2)).exp()
        - 10.0 * (-d2 / 5.0 + d2.powi(3) + d1.powi(5)) * (-d1 * d1 - d2 * d2).exp()
        - 3.0 * (-(2.0 - d2).powi(2) - d1 * d1).exp()
        + lin;
    [v1, v2]
}

/// Benchmark values plus independent Gaussian noise, flattened point-major.
pub fn simulated_oracle(points: &[Vec<f64>], noise_std: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(points.len() * 2);
    for p in points {
        for (v, s) in eval_test_function(p).into_iter().zip(noise_std) {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(v + s * z);
        }
    }
    out
}

/// Simulated experiments on an arbitrary response, with per-call noise streams.
pub struct SimulatedOracle<F> {
    response: F,
    noise_std: Vec<f64>,
    seed: u64,
}

impl<F: Fn(&[f64]) -> Vec<f64>> SimulatedOracle<F> {
    pub fn new(response: F, noise_std: Vec<f64>, seed: u64) -> Self {
        Self {
            response,
            noise_std,
            seed,
        }
    }
}

/// [`SimulatedOracle`] on the benchmark function.
pub type BenchmarkOracle = SimulatedOracle<fn(&[f64]) -> Vec<f64>>;

impl BenchmarkOracle {
    /// The benchmark function on `[-3, 3]²`.
    pub fn benchmark(noise_std: Vec<f64>, seed: u64) -> Self {
        Self::new(|d| eval_test_function(d).to_vec(), noise_std, seed)
    }
}

impl<F: Fn(&[f64]) -> Vec<f64>> Oracle for SimulatedOracle<F> {
    fn observe(&mut self, points: &[Vec<f64>], call_index: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(call_index);
        let mut out = Vec::with_capacity(points.len() * self.noise_std.len());
        for p in points {
            let v = (self.response)(p);
            check_dim("oracle response", self.noise_std.len(), v.len())?;
            for (v, s) in v.into_iter().zip(&self.noise_std) {
                let z: f64 = StandardNormal.sample(&mut rng);
                out.push(v + s * z);
            }
        }
        Ok(out)
    }
}

/// Joint Gaussian conditioning of `f(z)` on every observation in `data`,
/// assembled as one dense covariance and solved with nalgebra's Cholesky.
pub fn joint_conditioning_oracle(
    model: &KernelModel,
    data: &Dataset,
    z: &[Vec<f64>],
) -> Result<NormalDist> {
    let e = model.tasks();
    let kzz = assemble_cross_cov(z, z, model)?;
    let mean_z = model.stacked_mean(z.len());
    if data.is_empty() {
        return Ok(NormalDist {
            mean: mean_z,
            cov: kzz,
        });
    }
    let mut a = assemble_cross_cov(data.points(), data.points(), model)?;
    for (i, v) in data.noise_var().iter().enumerate() {
        a[(i, i)] += v;
    }
    let k1z = assemble_cross_cov(data.points(), z, model)?;
    let chol = a.cholesky().ok_or(TadError::NumericalSingularity {
        context: "dense joint covariance",
        order: data.len() * e,
        max_jitter: 0.0,
    })?;
    let resid = DVector::from_column_slice(data.observations()) - model.stacked_mean(data.len());
    let mean = mean_z + k1z.transpose() * chol.solve(&resid);
    let cov = &kzz - k1z.transpose() * chol.solve(&k1z);
    Ok(NormalDist {
        mean,
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Dense log-density of `v` under `dist`, constant omitted.
fn dense_log_density(dist: &NormalDist, v: &DVector<f64>) -> Result<f64> {
    let chol = dist
        .cov
        .clone()
        .cholesky()
        .ok_or(TadError::NumericalSingularity {
            context: "predictive covariance",
            order: dist.dim(),
            max_jitter: 0.0,
        })?;
    let r = v - &dist.mean;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * log_det - 0.5 * r.dot(&chol.solve(&r)))
}

/// Monte-Carlo estimate of `E_{g₂|g₁}[L_P]` and its standard error.
///
/// Draws `g₂ ~ N(p(2|1), Q(2|1))` and evaluates the predictive
/// log-likelihood by dense conditioning on the stacked data. Samples are
/// split over fixed chunks, each with its own stream, so the result does not
/// depend on the thread count.
pub fn mc_expectation_oracle(
    inputs: &AcquisitionInputs<'_>,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let model = inputs.model;
    let e = model.tasks();
    let x = vec![inputs.target_point.clone()];
    let f_t = DVector::from_column_slice(&inputs.target_design);
    if inputs.batch_points.is_empty() {
        let pred = joint_conditioning_oracle(model, inputs.data, &x)?;
        return Ok((dense_log_density(&pred, &f_t)?, 0.0));
    }
    check_dim(
        "batch noise diagonal",
        inputs.batch_points.len() * e,
        inputs.batch_noise.len(),
    )?;
    // g₂ | g₁
    let mut pred2 = joint_conditioning_oracle(model, inputs.data, &inputs.batch_points)?;
    for (i, v) in inputs.batch_noise.iter().enumerate() {
        pred2.cov[(i, i)] += v;
    }
    let l2 = pred2
        .cov
        .clone()
        .cholesky()
        .ok_or(TadError::NumericalSingularity {
            context: "Q(2|1) sampling factor",
            order: pred2.dim(),
            max_jitter: 0.0,
        })?
        .l();

    // f(x) | (g₁, g₂) = μ + W (g - m) with a fixed covariance
    let mut stacked = inputs.data.clone();
    for (i, p) in inputs.batch_points.iter().enumerate() {
        stacked.push(
            p.clone(),
            &vec![0.0; e],
            &inputs.batch_noise[i * e..(i + 1) * e],
        )?;
    }
    let mut a = assemble_cross_cov(stacked.points(), stacked.points(), model)?;
    for (i, v) in stacked.noise_var().iter().enumerate() {
        a[(i, i)] += v;
    }
    let k_ax = assemble_cross_cov(stacked.points(), &x, model)?;
    let chol = a.cholesky().ok_or(TadError::NumericalSingularity {
        context: "stacked joint covariance",
        order: stacked.len() * e,
        max_jitter: 0.0,
    })?;
    let w = chol.solve(&k_ax).transpose();
    let mut cov = assemble_cross_cov(&x, &x, model)? - &w * &k_ax;
    cov = (&cov + cov.transpose()) * 0.5;
    let cov_chol = cov
        .clone()
        .cholesky()
        .ok_or(TadError::NumericalSingularity {
            context: "Q(f|1+2)",
            order: e,
            max_jitter: 0.0,
        })?;
    let log_det = 2.0 * cov_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let prior_mean = model.stacked_mean(stacked.len());
    let g1 = DVector::from_column_slice(inputs.data.observations());
    let n1 = g1.len();
    let base = model.task_means.to_vec();

    const CHUNKS: usize = 64;
    let per_chunk = n_samples.div_ceil(CHUNKS);
    let sums = par::map_indexed(CHUNKS, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let n = per_chunk.min(n_samples.saturating_sub(c * per_chunk));
        let mut g = DVector::zeros(prior_mean.len());
        g.rows_mut(0, n1).copy_from(&g1);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = DVector::from_fn(l2.nrows(), |_, _| StandardNormal.sample(&mut rng));
            let g2 = &pred2.mean + &l2 * z;
            g.rows_mut(n1, g2.len()).copy_from(&g2);
            let mean = DVector::from_column_slice(&base) + &w * (&g - &prior_mean);
            let r = &f_t - mean;
            let lp = -0.5 * log_det - 0.5 * r.dot(&cov_chol.solve(&r));
            s += lp;
            s2 += lp * lp;
        }
        (s, s2, n)
    });
    let (s, s2, n) = sums
        .into_iter()
        .fold((0.0, 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    Ok((mean, (var / nf).sqrt()))
}

/// Discrepancy between the updated covariance with noisy redundant points
/// and its noise-free limit.
///
/// `data` must be noise-free. For each `ε`, the batch is `fresh ∪ duplicates`
/// with noise `ε` on every entry, and the updated covariance comes from the
/// production acquisition path. The limit conditions densely on `data ∪ fresh`
/// with no noise on the fresh points. Returns `(ε, ‖Q(ε) - Q_lim‖_F)` rows and
/// `‖Q_lim‖_F`.
pub fn redundancy_limit_oracle(
    model: &KernelModel,
    data: &Dataset,
    x: &[f64],
    fresh: &[Vec<f64>],
    duplicates: &[Vec<f64>],
    eps_ladder: &[f64],
) -> Result<(Vec<(f64, f64)>, f64)> {
    let e = model.tasks();
    let mut limit_data = data.clone();
    for p in fresh {
        limit_data.push(p.clone(), &vec![0.0; e], &vec![0.0; e])?;
    }
    let limit = joint_conditioning_oracle(model, &limit_data, &[x.to_vec()])?.cov;
    let batch: Vec<Vec<f64>> = fresh.iter().chain(duplicates).cloned().collect();
    let rows = eps_ladder
        .iter()
        .map(|&eps| {
            let ctx = AcquisitionContext::new(model, data, &vec![0.0; e], &vec![eps; e])?;
            let (_, _, q12) = ctx.updated_covariance(x, &batch)?;
            Ok((eps, (q12 - &limit).norm()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, limit.norm()))
}

/// Best value of `f` over a `n × n` grid on a two-dimensional box.
pub fn grid_max_2d<F: Fn(&[f64]) -> Option<f64>>(
    f: F,
    lower: &[f64],
    upper: &[f64],
    n: usize,
) -> Option<(Vec<f64>, f64)> {
    let step = |k: usize, i: usize| lower[k] + (upper[k] - lower[k]) * i as f64 / (n - 1) as f64;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for i in 0..n {
        for j in 0..n {
            let p = vec![step(0, i), step(1, j)];
            if let Some(v) = f(&p) {
                if best.as_ref().is_none_or(|(_, b)| v > *b) {
                    best = Some((p, v));
                }
            }
        }
    }
    best
}

/// One-sample Kolmogorov–Smirnov test against U(0,1): `(D, p-value)`.
pub fn ks_uniform(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let u = u.clamp(0.0, 1.0);
            ((i as f64 + 1.0) / n - u).max(u - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// Draws `n` points uniformly from a box.
pub fn uniform_points(lower: &[f64], upper: &[f64], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            lower
                .iter()
                .zip(upper)
                .map(|(l, u)| rng.random_range(*l..=*u))
                .collect()
        })
        .collect()
}

/// Size limits for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceLimits {
    pub max_dim: usize,
    pub max_tasks: usize,
    pub min_train: usize,
    pub max_train: usize,
    pub max_batch: usize,
}

/// A random, well-conditioned acquisition problem.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub model: KernelModel,
    pub data: Dataset,
    pub batch: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    /// Per-task noise variance shared by every batch point.
    pub noise: Vec<f64>,
}

impl RandomInstance {
    pub fn batch_noise(&self) -> Vec<f64> {
        self.noise.repeat(self.batch.len())
    }

    pub fn inputs(&self) -> AcquisitionInputs<'_> {
        AcquisitionInputs {
            model: &self.model,
            data: &self.data,
            batch_points: self.batch.clone(),
            target_point: self.x.clone(),
            target_design: self.target.clone(),
            batch_noise: self.batch_noise(),
        }
    }
}

/// Random SE-kernel model with one or two components, points in `[-1, 1]ᴰ`,
/// noise variances in `[0.01, 0.1]`, and observations drawn uniformly.
pub fn random_instance(seed: u64, lim: InstanceLimits) -> Result<RandomInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=lim.max_dim);
    let e = rng.random_range(1..=lim.max_tasks);
    let n1 = rng.random_range(lim.min_train..=lim.max_train);
    let n2 = rng.random_range(1..=lim.max_batch);
    let n_comp = rng.random_range(1..=2);
    let mut components = Vec::with_capacity(n_comp);
    for _ in 0..n_comp {
        let lengthscales = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
        let scalar = ScalarKernelParams::new(rng.random_range(0.5..2.0), lengthscales)?;
        let mut l = DMatrix::zeros(e, e);
        for i in 0..e {
            for j in 0..i {
                l[(i, j)] = rng.random_range(-0.5..0.5);
            }
            l[(i, i)] = rng.random_range(0.5..1.2);
        }
        components.push(KernelComponent {
            scalar,
            task: TaskMatrixParams::from_cholesky(l)?,
        });
    }
    let means = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
    let model = KernelModel::new(means, components)?;
    let mut cube = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let points = cube(n1);
    let batch = cube(n2);
    let x = cube(1).remove(0);
    let noise: Vec<f64> = (0..e).map(|_| rng.random_range(0.01..0.1)).collect();
    let obs = (0..n1 * e).map(|_| rng.random_range(-1.5..1.5)).collect();
    let data = Dataset::new(e, points, obs, noise.repeat(n1))?;
    let target = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(RandomInstance {
        model,
        data,
        batch,
        x,
        target,
        noise,
    })
}

/// A ready-to-run benchmark campaign configuration.
#[derive(Debug, Clone)]
pub struct BenchmarkScenario {
    pub spec: ProblemSpec,
    pub conv: ConvergenceConfig,
    pub settings: CampaignSettings,
    pub init_design: Dataset,
    pub x0: Vec<f64>,
}

/// Benchmark campaign: `N₁ = 4` design points drawn around `(1.5, -1.5)`
/// with spread 0.25, `N₂ = 3`, tolerance 0.01 and noise std 0.01.
pub fn benchmark_scenario(target: [f64; 2], x0: [f64; 2], seed: u64) -> Result<BenchmarkScenario> {
    let spec = ProblemSpec::new(
        TEST_LOWER.to_vec(),
        TEST_UPPER.to_vec(),
        target.to_vec(),
        vec![0.01, 0.01],
    )?;
    let settings = CampaignSettings {
        noise_std: vec![0.01, 0.01],
        ..CampaignSettings::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let points: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut p: Vec<f64> = [1.5, -1.5]
                .iter()
                .map(|c| c + 0.25 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            spec.clip(&mut p);
            p
        })
        .collect();
    let obs = simulated_oracle(&points, &settings.noise_std, seed.wrapping_add(0x5eed));
    let init_design = Dataset::new(2, points, obs, settings.noise_var(2).repeat(4))?;
    Ok(BenchmarkScenario {
        spec,
        conv: ConvergenceConfig::default(),
        settings,
        init_design,
        x0: x0.to_vec(),
    })
}

/// Target reachable inside the domain, start at `(-2, 2)`.
pub const SUCCESS_TARGET: [f64; 2] = [0.3380, 0.3502];
/// Target used for the give-up configuration, start at `(2, 2)`.
pub const FAILURE_TARGET: [f64; 2] = [-1.0, -1.0];
