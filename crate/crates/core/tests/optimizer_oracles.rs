use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tad_core::acquisition::AcquisitionContext;
use tad_core::gp::marginal_log_likelihood;
use tad_core::optim::{
    bfgs_maximize, gradient_check, maximize_gp_hyperparams, maximize_tad, OptimizerConfig,
    TadProblem,
};
use tad_core::testbed::{random_instance, InstanceLimits};
use tad_core::{Dataset, KernelComponent, KernelModel, ScalarKernelParams, TaskMatrixParams};

fn scalar_model(mean: f64, variance: f64, lengthscale: f64) -> KernelModel {
    KernelModel::new(
        vec![mean],
        vec![KernelComponent {
            scalar: ScalarKernelParams::new(variance, vec![lengthscale]).unwrap(),
            task: TaskMatrixParams::scaled_identity(1, 1.0),
        }],
    )
    .unwrap()
}

fn line_data(f: impl Fn(f64) -> f64, n: usize, noise: f64) -> Dataset {
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![-2.0 + 4.0 * i as f64 / (n - 1) as f64])
        .collect();
    let obs = pts.iter().map(|p| f(p[0])).collect();
    Dataset::new(1, pts, obs, vec![noise; n]).unwrap()
}

fn fitted_line_model(data: &Dataset) -> KernelModel {
    let cfg = OptimizerConfig {
        early_stop_p_band: (1.0, 1.0),
        ..Default::default()
    };
    maximize_gp_hyperparams(
        data,
        &scalar_model(0.0, 1.0, 1.0),
        &cfg,
        Some(&[(0.2, 80.0)]),
        3,
    )
    .unwrap()
    .0
}

#[test]
fn gradient_check_examples() {
    let bowl = |v: &[f64]| -> tad_core::Result<(f64, Vec<f64>)> {
        Ok((
            -v.iter().map(|x| x * x).sum::<f64>(),
            v.iter().map(|x| -2.0 * x).collect(),
        ))
    };
    let p = [0.3, -1.7, 2.5];
    assert!(gradient_check(bowl, &p).unwrap() <= 1e-7);
    let doubled = |v: &[f64]| bowl(v).map(|(f, g)| (f, g.iter().map(|x| 2.0 * x).collect()));
    let err = gradient_check(doubled, &p).unwrap();
    assert!((err - 1.0).abs() < 1e-6, "{err}");
    let bad = |_: &[f64]| -> tad_core::Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![0.0])) };
    assert!(gradient_check(bad, &[0.0]).is_err());
}

#[test]
fn bfgs_finds_concave_quadratic_maximum() {
    let f = |v: &[f64]| {
        Some((
            -(v[0] - 1.0).powi(2) - 4.0 * (v[1] + 2.0).powi(2),
            vec![-2.0 * (v[0] - 1.0), -8.0 * (v[1] + 2.0)],
        ))
    };
    let r = bfgs_maximize(
        f,
        &[5.0, 5.0],
        &OptimizerConfig::default(),
        10.0,
        |_, _, _| false,
    )
    .unwrap();
    assert!(r.converged);
    assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] + 2.0).abs() < 1e-6);
}

#[test]
fn stationary_init_is_returned_untouched() {
    let data = line_data(|x| (1.3 * x).sin(), 12, 1e-3);
    let cfg = OptimizerConfig {
        early_stop_p_band: (1.0, 1.0),
        max_iters: 2000,
        ..Default::default()
    };
    let (fitted, r) =
        maximize_gp_hyperparams(&data, &scalar_model(0.0, 1.0, 1.0), &cfg, None, 1).unwrap();
    assert!(r.converged);
    let (again, r2) = maximize_gp_hyperparams(&data, &fitted, &cfg, None, 1).unwrap();
    assert!(r2.converged);
    assert_eq!(r2.iters, 0);
    assert_eq!(again.to_params(), fitted.to_params());
}

#[test]
fn lengthscale_is_recovered_from_prior_draw() {
    let (ell, sf) = (0.7, 1.3);
    let truth = scalar_model(0.0, sf * sf, ell);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let pts: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-5.0..5.0)]).collect();
    let k = tad_core::kernel::assemble_cross_cov(&pts, &pts, &truth).unwrap();
    let l = (k + DMatrix::identity(60, 60) * 1e-10)
        .cholesky()
        .unwrap()
        .l();
    let z = DVector::from_fn(60, |_, _| rng.sample::<f64, _>(StandardNormal));
    let g = l * z;
    let data = Dataset::new(1, pts, g.as_slice().to_vec(), vec![0.0; 60]).unwrap();
    let (fit, _) = maximize_gp_hyperparams(
        &data,
        &scalar_model(0.0, 1.0, 2.0),
        &OptimizerConfig::default(),
        Some(&[(0.05, 50.0)]),
        9,
    )
    .unwrap();
    let got = fit.components[0].scalar.lengthscales[0];
    assert!(got > ell / 1.5 && got < ell * 1.5, "recovered {got}");
}

#[test]
fn gradient_fit_beats_random_search() {
    let inst = random_instance(
        404,
        InstanceLimits {
            max_dim: 2,
            max_tasks: 2,
            min_train: 10,
            max_train: 10,
            max_batch: 1,
        },
    )
    .unwrap();
    let init = &inst.model;
    let (_, r) =
        maximize_gp_hyperparams(&inst.data, init, &OptimizerConfig::default(), None, 17).unwrap();
    let p0 = init.to_params();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..500 {
        let p: Vec<f64> = p0.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
        if let Ok(v) = init
            .with_params(&p)
            .and_then(|m| marginal_log_likelihood(&m, &inst.data))
        {
            best = best.max(v);
        }
    }
    assert!(r.value >= best, "gradient {} random {}", r.value, best);
}

#[test]
fn tad_finds_unique_root_in_one_dimension() {
    let data = line_data(|x| x, 15, 1e-4);
    let model = fitted_line_model(&data);
    let ctx = AcquisitionContext::new(&model, &data, &[0.5], &[1e-4]).unwrap();
    let problem = TadProblem {
        ctx,
        lower: vec![-2.0],
        upper: vec![2.0],
        penalty_strength: 10.0,
    };
    let opt = maximize_tad(
        &problem,
        &[-1.5],
        &[vec![-1.2], vec![-1.0]],
        &OptimizerConfig::default(),
        5,
    )
    .unwrap();
    let mut grid_best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=4000 {
        let x = -2.0 + i as f64 * 1e-3;
        let v = problem.ctx.breakdown(&[x], &opt.batch).unwrap().total;
        if v > grid_best.0 {
            grid_best = (v, x);
        }
    }
    assert!(
        (grid_best.1 - 0.5).abs() < 0.1,
        "grid argmax {}",
        grid_best.1
    );
    assert!((opt.x[0] - 0.5).abs() < 0.1, "returned {}", opt.x[0]);
}

#[test]
fn tad_beats_grid_with_batch_fixed() {
    let inst = random_instance(
        2024,
        InstanceLimits {
            max_dim: 1,
            max_tasks: 2,
            min_train: 8,
            max_train: 8,
            max_batch: 3,
        },
    )
    .unwrap();
    let pts: Vec<Vec<f64>> = inst
        .data
        .points()
        .iter()
        .map(|p| vec![p[0], -p[0] * 0.5])
        .collect();
    let model = KernelModel::new(
        inst.model.task_means.clone(),
        inst.model
            .components
            .iter()
            .map(|c| KernelComponent {
                scalar: ScalarKernelParams::new(
                    c.scalar.signal_variance,
                    vec![c.scalar.lengthscales[0], 0.9],
                )
                .unwrap(),
                task: c.task.clone(),
            })
            .collect(),
    )
    .unwrap();
    let e = model.tasks();
    let data = Dataset::new(
        e,
        pts,
        inst.data.observations().to_vec(),
        inst.data.noise_var().to_vec(),
    )
    .unwrap();
    let ctx = AcquisitionContext::new(&model, &data, &inst.target, &inst.noise).unwrap();
    let problem = TadProblem {
        ctx,
        lower: vec![-1.0; 2],
        upper: vec![1.0; 2],
        penalty_strength: 10.0 * e as f64,
    };
    let batch0: Vec<Vec<f64>> = (0..3).map(|i| vec![0.2 * i as f64 - 0.2, 0.1]).collect();
    let opt = maximize_tad(
        &problem,
        &[0.0, 0.0],
        &batch0,
        &OptimizerConfig::default(),
        8,
    )
    .unwrap();
    let mut grid = f64::NEG_INFINITY;
    for i in 0..41 {
        for j in 0..41 {
            let x = [-1.0 + i as f64 * 0.05, -1.0 + j as f64 * 0.05];
            let v = TadProblem::flatten(&x, &opt.batch);
            grid = grid.max(problem.objective(&v).unwrap().0);
        }
    }
    assert!(
        opt.objective >= grid,
        "optimum {} grid {}",
        opt.objective,
        grid
    );
}

#[test]
fn tad_never_decreases_from_initializer() {
    for seed in 0..10 {
        let inst = random_instance(
            seed,
            InstanceLimits {
                max_dim: 2,
                max_tasks: 2,
                min_train: 3,
                max_train: 6,
                max_batch: 3,
            },
        )
        .unwrap();
        let ctx =
            AcquisitionContext::new(&inst.model, &inst.data, &inst.target, &inst.noise).unwrap();
        let d = inst.x.len();
        let problem = TadProblem {
            ctx,
            lower: vec![-1.0; d],
            upper: vec![1.0; d],
            penalty_strength: 20.0,
        };
        let cfg = OptimizerConfig {
            restarts: 1,
            ..Default::default()
        };
        let start = problem
            .objective(&TadProblem::flatten(&inst.x, &inst.batch))
            .unwrap()
            .0;
        let opt = maximize_tad(&problem, &inst.x, &inst.batch, &cfg, seed).unwrap();
        assert!(opt.objective >= start - 1e-9);
        let cfg0 = OptimizerConfig { restarts: 0, ..cfg };
        let again = maximize_tad(&problem, &opt.x, &opt.batch, &cfg0, seed).unwrap();
        assert!(again.objective >= opt.objective - 1e-9);
        let moved = again
            .x
            .iter()
            .zip(&opt.x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(moved < 1e-3, "moved {moved}");
    }
}
