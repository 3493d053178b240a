use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tad_core::campaign::{
    check_convergence, compute_ub, initialize_campaign, perturbed_init, Branch, CampaignState,
    ConvergenceConfig, InitializationPolicy, Oracle, Outcome, PendingPhase, ProblemSpec,
    UncertaintyBox,
};
use tad_core::gp::predictive_given_1;
use tad_core::testbed::{
    benchmark_scenario, joint_conditioning_oracle, random_instance, BenchmarkOracle,
    InstanceLimits, SimulatedOracle, SUCCESS_TARGET,
};
use tad_core::{Dataset, TadError};

fn start(seed: u64) -> CampaignState {
    let sc = benchmark_scenario(SUCCESS_TARGET, [-2.0, 2.0], seed).unwrap();
    initialize_campaign(sc.spec, sc.conv, sc.settings, sc.init_design, sc.x0, seed).unwrap()
}

/// Honest oracle that can be told to corrupt batch observations.
struct Saboteur {
    inner: BenchmarkOracle,
    corrupt: bool,
}

impl Oracle for Saboteur {
    fn observe(&mut self, points: &[Vec<f64>], call_index: u64) -> tad_core::Result<Vec<f64>> {
        let mut obs = self.inner.observe(points, call_index)?;
        if self.corrupt && points.len() > 1 {
            obs.iter_mut().for_each(|v| *v += 50.0);
        }
        Ok(obs)
    }
}

#[test]
fn success_configuration_initializes() {
    let s = start(0);
    assert_eq!(s.data.len(), 4);
    assert_eq!(s.n_kernels, 2);
    assert_eq!(s.model.n_components(), 2);
    assert_eq!((s.iter, s.n_check), (0, 0));
    assert!(!s.converged && !s.check_model && s.perturb);
    assert_eq!(s.outcome, Outcome::Running);
    let pending = s.pending.as_ref().unwrap();
    assert_eq!(pending.phase, PendingPhase::InitialBatch);
    assert_eq!(pending.points.len(), 3);
    assert!(pending.points.iter().all(|p| s.spec.contains(p)));
    for p in s.data.points() {
        assert!((p[0] - 1.5).abs() < 1.5 && (p[1] + 1.5).abs() < 1.5);
    }
    assert_eq!(start(0).batch, s.batch);
    assert_ne!(start(1).batch, s.batch);
}

#[test]
fn empty_design_and_outside_start_are_rejected() {
    let sc = benchmark_scenario(SUCCESS_TARGET, [-2.0, 2.0], 0).unwrap();
    let err = initialize_campaign(
        sc.spec.clone(),
        sc.conv.clone(),
        sc.settings.clone(),
        Dataset::empty(2),
        sc.x0.clone(),
        0,
    );
    assert!(matches!(err, Err(TadError::ContractViolation(_))));
    let err = initialize_campaign(
        sc.spec,
        sc.conv,
        sc.settings,
        sc.init_design,
        vec![5.0, 0.0],
        0,
    );
    assert!(matches!(err, Err(TadError::ContractViolation(_))));
}

#[test]
fn collapsed_cloud_is_separated_by_duplicate_guard() {
    let mut sc = benchmark_scenario(SUCCESS_TARGET, [-2.0, 2.0], 3).unwrap();
    sc.settings.policy.cluster_scale = 1e-12;
    let s = initialize_campaign(sc.spec, sc.conv, sc.settings, sc.init_design, sc.x0, 3).unwrap();
    let b = &s.batch;
    let near = |p: &[f64], q: &[f64]| p.iter().zip(q).all(|(a, c)| (a - c).abs() < 6e-6);
    assert!(near(&b[0], &[-2.0, 2.0]));
    for i in 0..b.len() {
        for j in 0..i {
            assert!(!near(&b[i], &b[j]));
        }
        assert!(b[i]
            .iter()
            .zip([-2.0, 2.0])
            .all(|(a, c)| (a - c).abs() < 1.0));
    }
}

#[test]
fn perturbation_pass_through_and_degenerate_scatter() {
    let policy = InitializationPolicy::default();
    let x = vec![0.5, -0.5];
    let batch = vec![vec![0.7, -0.1], vec![0.1, 0.3]];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (xi, bi) = perturbed_init(&x, &batch, false, &policy, &mut rng).unwrap();
    assert_eq!((xi, bi), (x.clone(), batch));

    let same = vec![x.clone(); 4];
    let reach = 5.0 * (policy.perturb_scale + policy.ridge.sqrt());
    for _ in 0..50 {
        let (xi, bi) = perturbed_init(&x, &same, true, &policy, &mut rng).unwrap();
        for p in std::iter::once(&xi).chain(&bi) {
            assert!(p.iter().zip(&x).all(|(a, b)| (a - b).abs() < reach));
        }
    }
    assert!(perturbed_init(&x, &[], true, &policy, &mut rng).is_err());
}

#[test]
fn elongated_scatter_leads_along_its_axis() {
    let policy = InitializationPolicy::default();
    let x = vec![0.0, 0.0];
    let batch: Vec<Vec<f64>> = (1..=6).map(|k| vec![0.2 * k as f64, 0.0]).collect();
    let mut hits = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, bi) = perturbed_init(&x, &batch, true, &policy, &mut rng).unwrap();
        let n = bi.len() as f64;
        let mean: Vec<f64> = (0..2)
            .map(|d| bi.iter().map(|p| p[d]).sum::<f64>() / n)
            .collect();
        let cov = DMatrix::from_fn(2, 2, |i, j| {
            bi.iter()
                .map(|p| (p[i] - mean[i]) * (p[j] - mean[j]))
                .sum::<f64>()
                / n
        });
        let eig = SymmetricEigen::new(cov);
        let top = if eig.eigenvalues[0] > eig.eigenvalues[1] {
            0
        } else {
            1
        };
        let axis = eig.eigenvectors.column(top);
        if axis[0].abs() > axis[1].abs() {
            hits += 1;
        }
    }
    assert!(hits >= 90, "{hits} of 100");
}

#[test]
fn uncertainty_box_examples() {
    let lim = InstanceLimits {
        max_dim: 2,
        max_tasks: 2,
        min_train: 3,
        max_train: 6,
        max_batch: 4,
    };
    for seed in 0..20 {
        let inst = random_instance(seed, lim).unwrap();
        let ub = compute_ub(&inst.model, &inst.data, &inst.x, &inst.batch, &inst.noise).unwrap();
        let stacked = {
            let mut d = inst.data.clone();
            let g = vec![0.0; inst.model.tasks()];
            for p in &inst.batch {
                d.push(p.clone(), &g, &inst.noise).unwrap();
            }
            d
        };
        let joint = joint_conditioning_oracle(&inst.model, &stacked, std::slice::from_ref(&inst.x))
            .unwrap();
        let p1 = predictive_given_1(&inst.model, &inst.data, &inst.x).unwrap();
        for i in 0..inst.model.tasks() {
            assert!((ub.half_widths[i] - joint.cov[(i, i)].sqrt()).abs() <= 1e-9);
            assert!((ub.center[i] - p1.mean[i]).abs() <= 1e-12);
        }
        let empty = compute_ub(&inst.model, &inst.data, &inst.x, &[], &inst.noise).unwrap();
        for i in 0..inst.model.tasks() {
            assert!((empty.half_widths[i] - p1.cov[(i, i)].sqrt()).abs() <= 1e-12);
        }
    }
    let inst = random_instance(5, lim).unwrap();
    let e = inst.model.tasks();
    let n = inst.data.len();
    let exact = Dataset::new(
        e,
        inst.data.points().to_vec(),
        inst.data.observations().to_vec(),
        vec![0.0; n * e],
    )
    .unwrap();
    let at = inst.data.points()[0].clone();
    let ub = compute_ub(&inst.model, &exact, &at, &inst.batch, &inst.noise).unwrap();
    assert!(
        ub.half_widths.iter().all(|h| *h <= 1e-4),
        "{:?}",
        ub.half_widths
    );
}

#[test]
fn convergence_check_examples() {
    let spec = ProblemSpec::new(
        vec![-3.0; 2],
        vec![3.0; 2],
        vec![0.3, -0.2],
        vec![0.01, 0.02],
    )
    .unwrap();
    let fresh = || ConvergenceConfig {
        eig_threshold: 1e-3,
        eig_patience: 50,
        eig_counter: 0,
    };
    let inside = UncertaintyBox {
        center: vec![0.3, -0.2],
        half_widths: vec![0.005, 0.01],
    };
    let mut conv = fresh();
    assert_eq!(
        check_convergence(&inside, 0.0, &spec, &mut conv),
        Outcome::Success
    );

    let wide = UncertaintyBox {
        center: vec![0.3, -0.2],
        half_widths: vec![0.005, 0.03],
    };
    let mut conv = fresh();
    conv.eig_counter = 7;
    assert_eq!(
        check_convergence(&wide, 1.0, &spec, &mut conv),
        Outcome::Running
    );
    assert_eq!(conv.eig_counter, 0);

    let mut conv = fresh();
    for k in 1..=51 {
        let out = check_convergence(&wide, 1e-4, &spec, &mut conv);
        assert_eq!(conv.eig_counter, k);
        assert_eq!(
            out,
            if k == 51 {
                Outcome::Failure
            } else {
                Outcome::Running
            }
        );
    }
}

#[test]
fn zero_budget_run_returns_immediately() {
    let mut s = start(0);
    let mut oracle = SimulatedOracle::benchmark(vec![0.01, 0.01], 0);
    assert_eq!(s.run(&mut oracle, 0).unwrap(), Outcome::Running);
    assert_eq!(s.oracle_calls, 0);
    assert!(s.history.is_empty());
}

#[test]
fn terminated_campaign_refuses_to_step() {
    let mut s = start(0);
    s.pending = None;
    s.outcome = Outcome::Success;
    let mut oracle = SimulatedOracle::benchmark(vec![0.01, 0.01], 0);
    assert!(matches!(
        s.step(&mut oracle),
        Err(TadError::AlreadyTerminated(_))
    ));
    assert!(matches!(s.propose(), Err(TadError::AlreadyTerminated(_))));
}

#[test]
fn two_rejections_add_a_component_and_roll_back() {
    let mut s = start(2);
    let mut oracle = Saboteur {
        inner: SimulatedOracle::benchmark(vec![0.01, 0.01], 2),
        corrupt: false,
    };
    loop {
        let n = s.data.len();
        let rec = s.step(&mut oracle).unwrap();
        if rec.branch == Branch::Accepted {
            assert!(rec.validation.p_value > s.settings.validation_threshold);
            assert_eq!(rec.acquired, 4);
            assert_eq!(s.data.len(), n + 4);
            break;
        }
        assert!(s.iter < 10);
    }
    assert_eq!(s.outcome, Outcome::Running);

    oracle.corrupt = true;
    let (n0, p0, iter0) = (s.data.len(), s.n_kernels, s.iter);
    let (x0, b0) = (s.x.clone(), s.batch.clone());
    let alert = s.step(&mut oracle).unwrap();
    assert_eq!(alert.branch, Branch::Alert);
    assert!(alert.validation.p_value < 0.01);
    assert_eq!(s.data.len(), n0 + 4);
    assert!(s.check_model && s.perturb);
    assert_eq!((s.n_check, s.n_kernels, s.iter), (1, p0, iter0 + 1));

    let (n1, x1, b1) = (s.data.len(), s.x.clone(), s.batch.clone());
    assert_ne!(x1, x0);
    assert_ne!(b1, b0);
    let alarm = s.step(&mut oracle).unwrap();
    assert_eq!(alarm.branch, Branch::Alarm);
    assert!(alarm.validation.p_value < 0.01);
    assert_eq!(s.data.len(), n1 + 3);
    assert_eq!(s.n_kernels, p0 + 1);
    assert_eq!(s.model.n_components(), p0 + 1);
    assert_eq!((s.x.clone(), s.batch.clone()), (x1, b1));
    assert_eq!(s.n_check, 0);
    assert!(!s.check_model && !s.perturb);
    assert_eq!(s.iter, iter0 + 1);
}

#[test]
fn campaign_invariants_hold_over_a_run() {
    let mut s = start(0);
    let mut oracle = SimulatedOracle::benchmark(vec![0.01, 0.01], 0);
    let mut prev_pts: Vec<Vec<f64>> = s.data.points().to_vec();
    let mut prev_obs: Vec<f64> = s.data.observations().to_vec();
    let mut prev_p = s.n_kernels;
    while s.outcome == Outcome::Running && s.iter < 40 {
        let rec = s.step(&mut oracle).unwrap();
        assert_eq!(&s.data.points()[..prev_pts.len()], prev_pts.as_slice());
        assert_eq!(
            &s.data.observations()[..prev_obs.len()],
            prev_obs.as_slice()
        );
        assert!(s.n_kernels >= prev_p);
        assert_eq!(
            s.n_kernels - prev_p,
            usize::from(rec.branch == Branch::Alarm)
        );
        let b = &rec.breakdown;
        assert!(
            (b.total - (b.log_det_term + b.data_fit_term + b.trace_term)).abs()
                <= 1e-9 * b.total.abs().max(1.0)
        );
        assert!(rec.eig_nats >= -1e-9);
        assert!((0.0..=1.0).contains(&rec.validation.p_value));
        assert!(rec.ub.half_widths.iter().all(|h| *h >= 0.0));
        assert_eq!(s.outcome != Outcome::Running, s.converged);
        prev_pts = s.data.points().to_vec();
        prev_obs = s.data.observations().to_vec();
        prev_p = s.n_kernels;
    }
    assert_eq!(s.outcome, Outcome::Success);
    let last = s.history.last().unwrap();
    for (i, (lo, hi)) in s.spec.ttr().into_iter().enumerate() {
        assert!(last.ub.center[i] - last.ub.half_widths[i] >= lo);
        assert!(last.ub.center[i] + last.ub.half_widths[i] <= hi);
    }
    let total: usize = s.history.iter().map(|r| r.acquired).sum();
    assert_eq!(s.data.len(), 4 + 3 + total);
}
