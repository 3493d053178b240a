//! The campaign state machine: model refits, TAD proposals, batch
//! validation with model complexification, and the success/failure
//! stopping rules.
//!
//! A pass proposes a target `x` and a batch `x₂`, acquires `g₂` at the batch,
//! and validates it against the model fitted before the batch was seen:
//!
//! * p-value above the threshold: convergence is checked, `g` is acquired at
//!   `x`, and both are appended;
//! * first sub-threshold p-value (alert): both are appended and the next pass
//!   re-optimizes from a fresh perturbation without refitting;
//! * second consecutive sub-threshold p-value (alarm): only `g₂` is
//!   appended, a kernel component is added, and `x`, `x₂` roll back to their
//!   values before the pass.
//!
//! Every pass can be driven by an [`Oracle`] ([`CampaignState::step`]) or
//! split into [`CampaignState::propose`] and [`CampaignState::ingest`] for
//! externally run experiments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::{AcquisitionBreakdown, AcquisitionContext};
use crate::error::{check_dim, Result, TadError};
use crate::gp::{data_predictive, Dataset};
use crate::kernel::{KernelComponent, KernelModel, ScalarKernelParams, TaskMatrixParams};
use crate::linalg::SpdFactor;
use crate::optim::{maximize_gp_hyperparams, maximize_tad, OptResult, OptimizerConfig, TadProblem};
use crate::validation::{batch_validation, training_fit, ValidationReport};

/// Source of experimental observations.
pub trait Oracle {
    /// Observations at `points`, flattened point-major (`points.len() · E` values).
    /// `call_index` counts oracle calls over the whole campaign.
    fn observe(&mut self, points: &[Vec<f64>], call_index: u64) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub target_design: Vec<f64>,
    pub tolerance: Vec<f64>,
}

impl ProblemSpec {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        target_design: Vec<f64>,
        tolerance: Vec<f64>,
    ) -> Result<Self> {
        let spec = Self {
            lower,
            upper,
            target_design,
            tolerance,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("domain upper bound", self.lower.len(), self.upper.len())?;
        check_dim("tolerance", self.target_design.len(), self.tolerance.len())?;
        if self.lower.is_empty() || self.target_design.is_empty() {
            return Err(TadError::ContractViolation("empty domain or design".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(TadError::ContractViolation("domain box is empty".into()));
        }
        if self.tolerance.iter().any(|t| !(*t > 0.0)) {
            return Err(TadError::ContractViolation(
                "tolerances must be positive".into(),
            ));
        }
        if self.target_design.iter().any(|v| !v.is_finite()) {
            return Err(TadError::NonFinite);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn tasks(&self) -> usize {
        self.target_design.len()
    }

    /// Target tolerance region `[f_T - τ, f_T + τ]` per design component.
    pub fn ttr(&self) -> Vec<(f64, f64)> {
        self.target_design
            .iter()
            .zip(&self.tolerance)
            .map(|(f, t)| (f - t, f + t))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }

    pub fn clip(&self, p: &mut [f64]) {
        for ((v, l), u) in p.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| v >= l && v <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub eig_threshold: f64,
    pub eig_patience: usize,
    pub eig_counter: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            eig_threshold: 1e-3,
            eig_patience: 50,
            eig_counter: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBox {
    pub center: Vec<f64>,
    pub half_widths: Vec<f64>,
}

impl UncertaintyBox {
    pub fn intervals(&self) -> Vec<(f64, f64)> {
        self.center
            .iter()
            .zip(&self.half_widths)
            .map(|(c, h)| (c - h, c + h))
            .collect()
    }

    /// Whether every interval lies inside the matching target interval.
    pub fn fits(&self, ttr: &[(f64, f64)]) -> bool {
        self.intervals()
            .iter()
            .zip(ttr)
            .all(|((lo, hi), (tlo, thi))| lo >= tlo && hi <= thi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitializationPolicy {
    /// Standard deviation of the initial batch cloud around the start point.
    pub cluster_scale: f64,
    /// Standard deviation of the perturbation applied before each optimization.
    pub perturb_scale: f64,
    /// Ridge added to the batch scatter before sampling from it.
    pub ridge: f64,
}

impl Default for InitializationPolicy {
    fn default() -> Self {
        Self {
            cluster_scale: 0.5,
            perturb_scale: 0.1,
            ridge: 1e-3,
        }
    }
}

impl InitializationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.cluster_scale > 0.0) || !(self.perturb_scale > 0.0) || !(self.ridge >= 0.0) {
            return Err(TadError::ContractViolation(format!(
                "invalid initialization policy {self:?}"
            )));
        }
        Ok(())
    }
}

/// Numeric knobs of a campaign that are not part of the problem itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CampaignSettings {
    pub batch_size: usize,
    /// Observation noise standard deviation per design component; empty means 0.01 each.
    pub noise_std: Vec<f64>,
    pub validation_threshold: f64,
    pub initial_components: usize,
    /// Domain penalty strength; `None` means `10·E`.
    pub penalty_strength: Option<f64>,
    pub policy: InitializationPolicy,
    /// Lengthscale range as fractions of each domain width.
    pub lengthscale_range: (f64, f64),
    pub gp_optimizer: OptimizerConfig,
    pub tad_optimizer: OptimizerConfig,
}

impl Default for CampaignSettings {
    fn default() -> Self {
        Self {
            batch_size: 3,
            noise_std: Vec::new(),
            validation_threshold: 0.01,
            initial_components: 2,
            penalty_strength: None,
            policy: InitializationPolicy::default(),
            lengthscale_range: (0.05, 20.0),
            gp_optimizer: OptimizerConfig {
                max_iters: 200,
                restarts: 2,
                ..OptimizerConfig::default()
            },
            tad_optimizer: OptimizerConfig {
                max_iters: 200,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl CampaignSettings {
    pub fn validate(&self, tasks: usize) -> Result<()> {
        if self.batch_size == 0 || self.initial_components == 0 {
            return Err(TadError::ContractViolation(
                "batch size and component count must be positive".into(),
            ));
        }
        if !self.noise_std.is_empty() {
            check_dim("noise std", tasks, self.noise_std.len())?;
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(TadError::ContractViolation(
                "noise std must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.validation_threshold) {
            return Err(TadError::ContractViolation(
                "validation threshold must be a probability".into(),
            ));
        }
        if self.penalty_strength.is_some_and(|s| !(s > 0.0)) {
            return Err(TadError::ContractViolation(
                "penalty strength must be positive".into(),
            ));
        }
        let (lo, hi) = self.lengthscale_range;
        if !(lo > 0.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(TadError::ContractViolation(format!(
                "lengthscale range must satisfy 0 < lo <= hi < inf, got ({lo}, {hi})"
            )));
        }
        self.policy.validate()?;
        self.gp_optimizer.validate()?;
        self.tad_optimizer.validate()
    }

    pub fn noise_var(&self, tasks: usize) -> Vec<f64> {
        if self.noise_std.is_empty() {
            vec![1e-4; tasks]
        } else {
            self.noise_std.iter().map(|s| s * s).collect()
        }
    }

    /// Absolute lengthscale bounds for a domain with the given widths.
    pub fn lengthscale_bounds(&self, widths: &[f64]) -> Vec<(f64, f64)> {
        let (lo, hi) = self.lengthscale_range;
        widths.iter().map(|w| (lo * w, hi * w)).collect()
    }

    pub fn penalty(&self, tasks: usize) -> f64 {
        self.penalty_strength.unwrap_or(10.0 * tasks as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Running,
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Accepted,
    Alert,
    Alarm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendingPhase {
    /// The start-up cloud around the initial target point.
    InitialBatch,
    /// The optimized batch `x₂` of a pass.
    Batch,
    /// The target point `x` of a pass whose batch has been ingested.
    Target,
}

/// Everything computed for a pass before its observations arrive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub model: KernelModel,
    pub x_prev: Vec<f64>,
    pub batch_prev: Vec<Vec<f64>>,
    pub x: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
    pub breakdown: AcquisitionBreakdown,
    pub ub: UncertaintyBox,
    pub tad_fit: OptResult,
    pub gp_fit: Option<OptResult>,
    pub training_fit: Option<ValidationReport>,
    pub batch_obs: Option<Vec<f64>>,
    pub validation: Option<ValidationReport>,
    pub branch: Option<Branch>,
    pub verdict: Option<Outcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pending {
    pub phase: PendingPhase,
    pub points: Vec<Vec<f64>>,
    pub proposal: Option<Box<Proposal>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Pass index, counting every pass including model re-checks.
    pub pass: u64,
    /// Iteration counter after this pass.
    pub iter: usize,
    pub branch: Branch,
    pub x: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
    pub breakdown: AcquisitionBreakdown,
    pub eig_nats: f64,
    pub validation: ValidationReport,
    pub training_fit: Option<ValidationReport>,
    pub ub: UncertaintyBox,
    /// Kernel components in the model used for this pass.
    pub n_kernels: usize,
    /// Consecutive low-information count after this pass.
    pub eig_counter: usize,
    /// Whether this pass ran the convergence test.
    pub convergence_checked: bool,
    pub acquired: usize,
    pub total_samples: usize,
    pub outcome: Outcome,
    pub gp_fit: Option<OptResult>,
    pub tad_fit: OptResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub spec: ProblemSpec,
    pub conv: ConvergenceConfig,
    pub settings: CampaignSettings,
    pub seed: u64,
    pub data: Dataset,
    pub model: KernelModel,
    pub n_kernels: usize,
    pub x: Vec<f64>,
    pub batch: Vec<Vec<f64>>,
    pub iter: usize,
    pub n_check: usize,
    pub converged: bool,
    pub check_model: bool,
    pub perturb: bool,
    pub outcome: Outcome,
    /// Next hyperparameter fit uses the full restart budget.
    pub full_refit: bool,
    pub passes: u64,
    pub oracle_calls: u64,
    pub pending: Option<Pending>,
    pub history: Vec<IterationRecord>,
}

/// What an [`CampaignState::ingest`] call completed.
#[derive(Debug, Clone, PartialEq)]
pub enum Ingested {
    /// The start-up cloud was appended; the campaign can now propose.
    Initialized,
    /// The batch was validated; observations at the target point are due next.
    NeedTarget,
    /// A pass finished.
    Completed(Box<IterationRecord>),
}

const STREAM_GP: u64 = 1;
const STREAM_PERTURB: u64 = 2;
const STREAM_TAD: u64 = 3;
const STREAM_GUARD: u64 = 4;
const STREAM_INIT: u64 = 5;

fn stream_rng(seed: u64, pass: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(pass);
    rng
}

fn normal_point<R: Rng>(center: &[f64], scale: f64, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Starting model: sample task means, `P` components with geometrically
/// shrinking lengthscales, and task matrices splitting the sample variance.
pub fn initial_model(spec: &ProblemSpec, data: &Dataset, components: usize) -> Result<KernelModel> {
    let e = spec.tasks();
    let n = data.len();
    if n == 0 {
        return Err(TadError::ContractViolation(
            "initial design is empty".into(),
        ));
    }
    let mut means = vec![0.0; e];
    for i in 0..n {
        for (m, v) in means.iter_mut().zip(data.observation(i)) {
            *m += v / n as f64;
        }
    }
    let mut vars = vec![0.0; e];
    for i in 0..n {
        for ((s, v), m) in vars.iter_mut().zip(data.observation(i)).zip(&means) {
            *s += (v - m).powi(2) / (n.max(2) - 1) as f64;
        }
    }
    let widths = spec.widths();
    let comps = (0..components)
        .map(|c| {
            let scale = 0.25 * 0.5f64.powi(c as i32);
            let kappa = DMatrix::from_diagonal(&DVector::from_iterator(
                e,
                vars.iter()
                    .map(|v| if *v > 1e-8 { v } else { &1.0 } / components as f64),
            ));
            Ok(KernelComponent {
                scalar: ScalarKernelParams::new(1.0, widths.iter().map(|w| scale * w).collect())?,
                task: TaskMatrixParams::from_covariance(&kappa)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    KernelModel::new(means, comps)
}

/// Adds one component with half the smallest existing lengthscales and a
/// small isotropic task matrix.
pub fn complexify(model: &KernelModel) -> Result<KernelModel> {
    let d = model.input_dim();
    let e = model.tasks();
    let lengthscales: Vec<f64> = (0..d)
        .map(|k| {
            0.5 * model
                .components
                .iter()
                .map(|c| c.scalar.lengthscales[k])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let n = model.n_components() as f64;
    let variance = model
        .components
        .iter()
        .map(|c| c.scalar.signal_variance)
        .sum::<f64>()
        / n;
    let kappa_diag = model
        .components
        .iter()
        .map(|c| c.task.kappa().diagonal().mean())
        .sum::<f64>()
        / n;
    let mut comps = model.components.clone();
    comps.push(KernelComponent {
        scalar: ScalarKernelParams::new(variance, lengthscales)?,
        task: TaskMatrixParams::scaled_identity(e, 0.1 * kappa_diag),
    });
    KernelModel::new(model.task_means.clone(), comps)
}

/// Starting points for the TAD optimizer.
///
/// With `perturb`, `x` and the first batch point are drawn around `x_prev`
/// with standard deviation `perturb_scale`; the remaining batch points are
/// drawn from `N(x_prev, S₂ + ridge·1)` where `S₂` is the second moment of
/// the previous batch about `x_prev`. Without `perturb` the inputs pass
/// through unchanged.
pub fn perturbed_init<R: Rng>(
    x_prev: &[f64],
    batch_prev: &[Vec<f64>],
    perturb: bool,
    policy: &InitializationPolicy,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if batch_prev.is_empty() {
        return Err(TadError::ContractViolation(
            "perturbation needs a batch".into(),
        ));
    }
    if !perturb {
        return Ok((x_prev.to_vec(), batch_prev.to_vec()));
    }
    let d = x_prev.len();
    let mut s2 = DMatrix::<f64>::identity(d, d) * policy.ridge;
    for b in batch_prev {
        check_dim("batch point", d, b.len())?;
        let dv = DVector::from_iterator(d, b.iter().zip(x_prev).map(|(p, q)| p - q));
        s2 += &dv * dv.transpose() / batch_prev.len() as f64;
    }
    let l = SpdFactor::new(&s2, "batch scatter")?;
    let x = normal_point(x_prev, policy.perturb_scale, rng);
    let mut batch = vec![normal_point(x_prev, policy.perturb_scale, rng)];
    for _ in 1..batch_prev.len() {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let step = l.lower() * z;
        batch.push(x_prev.iter().zip(step.iter()).map(|(a, b)| a + b).collect());
    }
    Ok((x, batch))
}

/// Uncertainty box at `x`: centered on `p(f|1)` with half-widths
/// `√diag Q(f|1+2)`.
pub fn compute_ub(
    model: &KernelModel,
    data: &Dataset,
    x: &[f64],
    batch: &[Vec<f64>],
    batch_noise_per_point: &[f64],
) -> Result<UncertaintyBox> {
    let target = vec![0.0; model.tasks()];
    let ctx = AcquisitionContext::new(model, data, &target, batch_noise_per_point)?;
    ub_from_context(&ctx, x, batch)
}

fn ub_from_context(
    ctx: &AcquisitionContext<'_>,
    x: &[f64],
    batch: &[Vec<f64>],
) -> Result<UncertaintyBox> {
    let (p1, _, q12) = ctx.updated_covariance(x, batch)?;
    Ok(UncertaintyBox {
        center: p1.iter().copied().collect(),
        half_widths: q12.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
    })
}

/// Success when the box fits the target region; otherwise counts consecutive
/// low-information checks and fails once the count exceeds the patience.
pub fn check_convergence(
    ub: &UncertaintyBox,
    eig: f64,
    spec: &ProblemSpec,
    conv: &mut ConvergenceConfig,
) -> Outcome {
    if ub.fits(&spec.ttr()) {
        return Outcome::Success;
    }
    if eig < conv.eig_threshold {
        conv.eig_counter += 1;
    } else {
        conv.eig_counter = 0;
    }
    if conv.eig_counter > conv.eig_patience {
        Outcome::Failure
    } else {
        Outcome::Running
    }
}

/// Sets up a campaign whose first pending batch is the start-up cloud
/// `x₂ ~ N(x0, σ²·1)` clipped to the domain.
pub fn initialize_campaign(
    spec: ProblemSpec,
    conv: ConvergenceConfig,
    settings: CampaignSettings,
    init_design: Dataset,
    x0: Vec<f64>,
    seed: u64,
) -> Result<CampaignState> {
    spec.validate()?;
    settings.validate(spec.tasks())?;
    check_dim("design tasks", spec.tasks(), init_design.tasks())?;
    check_dim("start point", spec.dim(), x0.len())?;
    if init_design.is_empty() {
        return Err(TadError::ContractViolation(
            "initial design is empty".into(),
        ));
    }
    if let Some(p) = init_design.points().first() {
        check_dim("design point", spec.dim(), p.len())?;
    }
    if !spec.contains(&x0) {
        return Err(TadError::ContractViolation(
            "start point lies outside the domain".into(),
        ));
    }
    if conv.eig_patience == 0 || !(conv.eig_threshold > 0.0) {
        return Err(TadError::ContractViolation(
            "invalid convergence configuration".into(),
        ));
    }
    let model = initial_model(&spec, &init_design, settings.initial_components)?;
    let mut rng = stream_rng(seed, 0, STREAM_INIT);
    let mut batch: Vec<Vec<f64>> = (0..settings.batch_size)
        .map(|_| {
            let mut p = normal_point(&x0, settings.policy.cluster_scale, &mut rng);
            spec.clip(&mut p);
            p
        })
        .collect();
    let tol = 1e-6 * spec.widths().iter().fold(0.0f64, |m, w| m.max(*w));
    guard_duplicates(
        &spec,
        &init_design,
        &mut batch,
        tol,
        settings.policy.perturb_scale,
        &mut rng,
    );
    Ok(CampaignState {
        n_kernels: settings.initial_components,
        spec,
        conv,
        settings,
        seed,
        data: init_design,
        model,
        x: x0,
        batch: batch.clone(),
        iter: 0,
        n_check: 0,
        converged: false,
        check_model: false,
        perturb: true,
        outcome: Outcome::Running,
        full_refit: true,
        passes: 0,
        oracle_calls: 0,
        pending: Some(Pending {
            phase: PendingPhase::InitialBatch,
            points: batch,
            proposal: None,
        }),
        history: Vec::new(),
    })
}

/// Jitters batch points closer than `tol` (sup norm) to a dataset point or an
/// earlier batch point.
fn guard_duplicates<R: Rng>(
    spec: &ProblemSpec,
    data: &Dataset,
    batch: &mut [Vec<f64>],
    tol: f64,
    scale: f64,
    rng: &mut R,
) {
    let near = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < tol);
    for m in 0..batch.len() {
        for _ in 0..16 {
            let (done, rest) = batch.split_at(m);
            let p = &rest[0];
            let clash = data.points().iter().any(|q| near(p, q)) || done.iter().any(|q| near(p, q));
            if !clash {
                break;
            }
            let mut moved = normal_point(p, scale, rng);
            spec.clip(&mut moved);
            batch[m] = moved;
        }
    }
}

impl CampaignState {
    pub fn tasks(&self) -> usize {
        self.spec.tasks()
    }

    pub fn noise_var(&self) -> Vec<f64> {
        self.settings.noise_var(self.tasks())
    }

    pub fn pending_points(&self) -> Option<&[Vec<f64>]> {
        self.pending.as_ref().map(|p| p.points.as_slice())
    }

    /// Points whose observations are due next, running the model fit and
    /// TAD optimization if nothing is pending yet.
    pub fn propose(&mut self) -> Result<Vec<Vec<f64>>> {
        if let Some(p) = &self.pending {
            return Ok(p.points.clone());
        }
        if self.outcome != Outcome::Running {
            return Err(TadError::AlreadyTerminated(format!("{:?}", self.outcome)));
        }
        let proposal = self.make_proposal()?;
        let points = proposal.batch.clone();
        self.pending = Some(Pending {
            phase: PendingPhase::Batch,
            points: points.clone(),
            proposal: Some(Box::new(proposal)),
        });
        Ok(points)
    }

    fn make_proposal(&mut self) -> Result<Proposal> {
        let pass = self.passes;
        let e = self.tasks();
        let noise = self.noise_var();
        let (model, gp_fit) = if self.check_model {
            (self.model.clone(), None)
        } else {
            self.iter += 1;
            let mut cfg = self.settings.gp_optimizer.clone();
            if !self.full_refit {
                cfg.restarts = 0;
            }
            let seed = stream_rng(self.seed, pass, STREAM_GP).random::<u64>();
            let bounds = self.settings.lengthscale_bounds(&self.spec.widths());
            match maximize_gp_hyperparams(&self.data, &self.model, &cfg, Some(&bounds), seed) {
                Ok((m, r)) => (m, Some(r)),
                Err(err) => {
                    tracing::warn!(%err, pass, "hyperparameter fit failed; keeping previous model");
                    (self.model.clone(), None)
                }
            }
        };
        self.full_refit = false;
        self.passes += 1;
        let training = training_fit(&model, &self.data).ok();

        let mut rng = stream_rng(self.seed, pass, STREAM_PERTURB);
        let (mut x0, mut b0) = perturbed_init(
            &self.x,
            &self.batch,
            self.perturb,
            &self.settings.policy,
            &mut rng,
        )?;
        self.spec.clip(&mut x0);
        b0.iter_mut().for_each(|p| self.spec.clip(p));

        let ctx = AcquisitionContext::new(&model, &self.data, &self.spec.target_design, &noise)?;
        let problem = TadProblem {
            ctx,
            lower: self.spec.lower.clone(),
            upper: self.spec.upper.clone(),
            penalty_strength: self.settings.penalty(e),
        };
        let seed = stream_rng(self.seed, pass, STREAM_TAD).random::<u64>();
        let opt = maximize_tad(&problem, &x0, &b0, &self.settings.tad_optimizer, seed)?;
        let (mut x, mut batch) = (opt.x, opt.batch);
        self.spec.clip(&mut x);
        batch.iter_mut().for_each(|p| self.spec.clip(p));
        let tol = 1e-6 * self.spec.widths().iter().fold(0.0f64, |m, w| m.max(*w));
        let mut rng = stream_rng(self.seed, pass, STREAM_GUARD);
        guard_duplicates(
            &self.spec,
            &self.data,
            &mut batch,
            tol,
            self.settings.policy.perturb_scale,
            &mut rng,
        );
        let breakdown = problem.ctx.breakdown(&x, &batch)?;
        let ub = ub_from_context(&problem.ctx, &x, &batch)?;
        drop(problem);
        Ok(Proposal {
            model,
            x_prev: self.x.clone(),
            batch_prev: self.batch.clone(),
            x,
            batch,
            breakdown,
            ub,
            tad_fit: opt.result,
            gp_fit,
            training_fit: training,
            batch_obs: None,
            validation: None,
            branch: None,
            verdict: None,
        })
    }

    /// Consumes observations for the pending points.
    pub fn ingest(&mut self, observations: &[f64]) -> Result<Ingested> {
        let e = self.tasks();
        let Some(pending) = self.pending.take() else {
            return Err(TadError::ContractViolation(
                "no observations are pending".into(),
            ));
        };
        if observations.len() != pending.points.len() * e {
            let expected = pending.points.len() * e;
            self.pending = Some(pending);
            return Err(TadError::DimensionMismatch {
                context: "ingested observations",
                expected,
                actual: observations.len(),
            });
        }
        if observations.iter().any(|v| !v.is_finite()) {
            self.pending = Some(pending);
            return Err(TadError::NonFinite);
        }
        let noise = self.noise_var();
        match pending.phase {
            PendingPhase::InitialBatch => {
                for (p, g) in pending.points.iter().zip(observations.chunks(e)) {
                    self.data.push(p.clone(), g, &noise)?;
                }
                Ok(Ingested::Initialized)
            }
            PendingPhase::Batch => {
                let mut prop = pending.proposal.ok_or_else(|| {
                    TadError::ContractViolation("pending batch has no proposal".into())
                })?;
                let pred = data_predictive(
                    &prop.model,
                    &self.data,
                    &prop.batch,
                    &noise.repeat(prop.batch.len()),
                )?;
                let report = batch_validation(&pred, observations)?;
                prop.batch_obs = Some(observations.to_vec());
                let accepted = report.p_value > self.settings.validation_threshold;
                prop.validation = Some(report);
                if accepted {
                    self.check_model = false;
                    self.n_check = 0;
                    let verdict = check_convergence(
                        &prop.ub,
                        prop.breakdown.eig_nats,
                        &self.spec,
                        &mut self.conv,
                    );
                    prop.branch = Some(Branch::Accepted);
                    prop.verdict = Some(verdict);
                } else {
                    self.n_check += 1;
                    if self.n_check >= 2 {
                        prop.branch = Some(Branch::Alarm);
                        return self.finish_alarm(*prop).map(Ingested::Completed);
                    }
                    prop.branch = Some(Branch::Alert);
                }
                self.pending = Some(Pending {
                    phase: PendingPhase::Target,
                    points: vec![prop.x.clone()],
                    proposal: Some(prop),
                });
                Ok(Ingested::NeedTarget)
            }
            PendingPhase::Target => {
                let prop = pending.proposal.ok_or_else(|| {
                    TadError::ContractViolation("pending target has no proposal".into())
                })?;
                self.finish_with_target(*prop, observations)
                    .map(Ingested::Completed)
            }
        }
    }

    fn append_batch(&mut self, prop: &Proposal) -> Result<()> {
        let e = self.tasks();
        let noise = self.noise_var();
        let obs = prop.batch_obs.as_deref().unwrap_or_default();
        for (p, g) in prop.batch.iter().zip(obs.chunks(e)) {
            self.data.push(p.clone(), g, &noise)?;
        }
        Ok(())
    }

    fn finish_with_target(&mut self, prop: Proposal, g: &[f64]) -> Result<Box<IterationRecord>> {
        self.append_batch(&prop)?;
        self.data.push(prop.x.clone(), g, &self.noise_var())?;
        self.x = prop.x.clone();
        self.batch = prop.batch.clone();
        self.perturb = true;
        let branch = prop.branch.unwrap_or(Branch::Accepted);
        match branch {
            Branch::Accepted => {
                let verdict = prop.verdict.unwrap_or(Outcome::Running);
                self.outcome = verdict;
                self.converged = verdict != Outcome::Running;
            }
            _ => self.check_model = true,
        }
        let n_kernels = prop.model.n_components();
        self.model = prop.model.clone();
        Ok(self.record(prop, branch, n_kernels, prop_acquired(branch, self)))
    }

    fn finish_alarm(&mut self, prop: Proposal) -> Result<Box<IterationRecord>> {
        self.append_batch(&prop)?;
        let n_kernels = prop.model.n_components();
        self.model = complexify(&prop.model)?;
        self.n_kernels = self.model.n_components();
        self.x = prop.x_prev.clone();
        self.batch = prop.batch_prev.clone();
        self.perturb = false;
        self.n_check = 0;
        self.check_model = false;
        self.full_refit = true;
        Ok(self.record(
            prop,
            Branch::Alarm,
            n_kernels,
            prop_acquired(Branch::Alarm, self),
        ))
    }

    fn record(
        &mut self,
        prop: Proposal,
        branch: Branch,
        n_kernels: usize,
        acquired: usize,
    ) -> Box<IterationRecord> {
        let rec = IterationRecord {
            pass: self.passes - 1,
            iter: self.iter,
            branch,
            eig_nats: prop.breakdown.eig_nats,
            x: prop.x,
            batch: prop.batch,
            breakdown: prop.breakdown,
            validation: prop.validation.expect("validated before recording"),
            training_fit: prop.training_fit,
            ub: prop.ub,
            n_kernels,
            eig_counter: self.conv.eig_counter,
            convergence_checked: branch == Branch::Accepted,
            acquired,
            total_samples: self.data.len(),
            outcome: self.outcome,
            gp_fit: prop.gp_fit,
            tad_fit: prop.tad_fit,
        };
        self.history.push(rec.clone());
        Box::new(rec)
    }

    /// One full pass with observations supplied by `oracle`.
    pub fn step<O: Oracle + ?Sized>(&mut self, oracle: &mut O) -> Result<Box<IterationRecord>> {
        loop {
            if self.pending.is_none() && self.outcome != Outcome::Running {
                return Err(TadError::AlreadyTerminated(format!("{:?}", self.outcome)));
            }
            let points = self.propose()?;
            let obs = oracle.observe(&points, self.oracle_calls)?;
            self.oracle_calls += 1;
            if let Ingested::Completed(rec) = self.ingest(&obs)? {
                return Ok(rec);
            }
        }
    }

    /// Runs passes until the campaign terminates or `max_iters` iterations
    /// have been started and no model re-check is outstanding.
    pub fn run<O: Oracle + ?Sized>(&mut self, oracle: &mut O, max_iters: usize) -> Result<Outcome> {
        while self.outcome == Outcome::Running && (self.check_model || self.iter < max_iters) {
            self.step(oracle)?;
        }
        Ok(self.outcome)
    }
}

fn prop_acquired(branch: Branch, state: &CampaignState) -> usize {
    match branch {
        Branch::Alarm => state.settings.batch_size,
        _ => state.settings.batch_size + 1,
    }
}
