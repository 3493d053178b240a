use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use tad_core::acquisition::{
    expected_information_gain_volume_ratio, AcqObjective, AcquisitionContext,
};
use tad_core::gp::predictive_given_1;
use tad_core::linalg::sym_eigenvalues;
use tad_core::optim::gradient_check;
use tad_core::testbed::{
    joint_conditioning_oracle, mc_expectation_oracle, random_instance, redundancy_limit_oracle,
    InstanceLimits, RandomInstance,
};
use tad_core::{
    correction_term, expected_information_gain, predictive_log_likelihood, tad_acquisition,
    Dataset, KernelComponent, KernelModel, ScalarKernelParams, TaskMatrixParams,
};

const LIM: InstanceLimits = InstanceLimits {
    max_dim: 3,
    max_tasks: 2,
    min_train: 1,
    max_train: 6,
    max_batch: 4,
};

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn stacked(inst: &RandomInstance) -> Dataset {
    let e = inst.model.tasks();
    let mut d = inst.data.clone();
    for p in &inst.batch {
        d.push(p.clone(), &vec![0.0; e], &inst.noise).unwrap();
    }
    d
}

/// Noise-free two-task model on a 2-D grid of training points.
fn noise_free_setup() -> (KernelModel, Dataset) {
    let model = KernelModel::new(
        vec![0.1, -0.2],
        vec![KernelComponent {
            scalar: ScalarKernelParams::new(1.0, vec![0.8, 1.1]).unwrap(),
            task: TaskMatrixParams::from_covariance(&DMatrix::from_row_slice(
                2,
                2,
                &[1.0, 0.3, 0.3, 0.8],
            ))
            .unwrap(),
        }],
    )
    .unwrap();
    let pts = vec![
        vec![-0.8, -0.5],
        vec![0.6, -0.7],
        vec![0.1, 0.9],
        vec![-0.4, 0.4],
    ];
    let obs = vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.4, 0.1, 0.0];
    (model, Dataset::new(2, pts, obs, vec![0.0; 8]).unwrap())
}

#[test]
fn correction_term_is_covariance_reduction() {
    for seed in 0..30 {
        let inst = random_instance(1_000 + seed, LIM).unwrap();
        let t = correction_term(&inst.inputs()).unwrap();
        let q1 = joint_conditioning_oracle(&inst.model, &inst.data, std::slice::from_ref(&inst.x))
            .unwrap()
            .cov;
        let q12 =
            joint_conditioning_oracle(&inst.model, &stacked(&inst), std::slice::from_ref(&inst.x))
                .unwrap()
                .cov;
        assert!(max_abs(&(&t - (q1 - q12))) < 1e-9, "seed {seed}");
        assert!(max_abs(&(&t - t.transpose())) < 1e-12);
        assert!(sym_eigenvalues(&t).iter().all(|l| *l >= -1e-10));
    }
}

#[test]
fn empty_batch_reduces_to_plain_prediction() {
    let mut inst = random_instance(17, LIM).unwrap();
    inst.batch.clear();
    let t = correction_term(&inst.inputs()).unwrap();
    assert_eq!(max_abs(&t), 0.0);
    let b = tad_acquisition(&inst.inputs()).unwrap();
    assert_eq!(b.trace_term, 0.0);
    let lp = predictive_log_likelihood(
        &inst.model,
        &inst.data,
        &[],
        &[],
        &[],
        &inst.x,
        &inst.target,
    )
    .unwrap();
    assert!((b.total - lp).abs() < 1e-12);
    assert_eq!(expected_information_gain(&inst.inputs()).unwrap(), 0.0);
    let (mean, se) = mc_expectation_oracle(&inst.inputs(), 1_000, 3).unwrap();
    assert!((mean - lp).abs() < 1e-10);
    assert_eq!(se, 0.0);
}

#[test]
fn predictive_log_likelihood_matches_dense_density() {
    for seed in 0..20 {
        let inst = random_instance(2_000 + seed, LIM).unwrap();
        let e = inst.model.tasks();
        let obs: Vec<f64> = (0..inst.batch.len() * e)
            .map(|i| 0.3 * (i as f64).sin())
            .collect();
        let mut d = inst.data.clone();
        for (i, p) in inst.batch.iter().enumerate() {
            d.push(p.clone(), &obs[i * e..(i + 1) * e], &inst.noise)
                .unwrap();
        }
        let pred =
            joint_conditioning_oracle(&inst.model, &d, std::slice::from_ref(&inst.x)).unwrap();
        let r = DVector::from_column_slice(&inst.target) - &pred.mean;
        let full = -0.5 * e as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * pred.cov.determinant().ln()
            - 0.5 * r.dot(&(pred.cov.clone().try_inverse().unwrap() * &r));
        let lp = predictive_log_likelihood(
            &inst.model,
            &inst.data,
            &inst.batch,
            &obs,
            &inst.batch_noise(),
            &inst.x,
            &inst.target,
        )
        .unwrap();
        let want = full + 0.5 * e as f64 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp - want).abs() < 1e-10, "seed {seed}: {lp} vs {want}");
    }
}

#[test]
fn breakdown_invariants_and_eig_forms() {
    for seed in 0..100 {
        let inst = random_instance(3_000 + seed, LIM).unwrap();
        let b = tad_acquisition(&inst.inputs()).unwrap();
        assert_eq!(b.total, b.log_det_term + b.data_fit_term + b.trace_term);
        assert!(b.trace_term <= 0.0);
        let compact = expected_information_gain(&inst.inputs()).unwrap();
        let volume = expected_information_gain_volume_ratio(&inst.inputs()).unwrap();
        assert!((compact - volume).abs() < 1e-9, "seed {seed}");
        assert!(compact >= -1e-9);
        assert!((b.eig_nats - compact).abs() < 1e-12);
    }
}

#[test]
fn monte_carlo_scalar_instance_and_error_scaling() {
    let inst = random_instance(
        4_242,
        InstanceLimits {
            max_dim: 1,
            max_tasks: 1,
            min_train: 2,
            max_train: 2,
            max_batch: 1,
        },
    )
    .unwrap();
    let total = tad_acquisition(&inst.inputs()).unwrap().total;
    let (m1, se1) = mc_expectation_oracle(&inst.inputs(), 20_000, 1).unwrap();
    let (_, se2) = mc_expectation_oracle(&inst.inputs(), 40_000, 1).unwrap();
    assert!((m1 - total).abs() < 3.0 * se1, "{m1} ± {se1} vs {total}");
    let ratio = se2 / se1;
    assert!(
        (ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2
    );
}

#[test]
fn redundant_batch_carries_little_information() {
    let (model, data) = noise_free_setup();
    let batch: Vec<Vec<f64>> = data.points()[..3].to_vec();
    let x = vec![0.2, 0.1];
    let ctx = AcquisitionContext::new(&model, &data, &[0.0, 0.0], &[1e-6, 1e-6]).unwrap();
    let t = ctx.correction_term(&x, &batch).unwrap();
    let q1 = predictive_given_1(&model, &data, &x).unwrap().cov;
    assert!(t.norm() <= 1e-4 * q1.norm());
    assert!(ctx.expected_information_gain(&x, &batch).unwrap() <= 1e-3);

    let base = AcquisitionContext::new(&model, &data, &[0.0, 0.0], &[1.0, 1.0])
        .unwrap()
        .breakdown(&x, &[])
        .unwrap()
        .total;
    let gaps: Vec<f64> = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&eps| {
            let c = AcquisitionContext::new(&model, &data, &[0.0, 0.0], &[eps, eps]).unwrap();
            (c.breakdown(&x, &batch).unwrap().total - base).abs()
        })
        .collect();
    // noise-free duplicates are uninformative at every ε, so the approach is exact
    assert!(gaps.iter().all(|g| *g <= 1e-12), "{gaps:?}");
}

#[test]
fn redundancy_ladder_cases() {
    let (model, data) = noise_free_setup();
    let x = vec![0.2, 0.1];
    let ladder = [1e-2, 1e-3, 1e-4, 1e-5];
    let dups: Vec<Vec<f64>> = data.points()[..2].to_vec();
    let fresh = vec![vec![0.9, 0.8], vec![-0.9, 0.0]];

    let (rows, lim) = redundancy_limit_oracle(&model, &data, &x, &[], &dups, &ladder).unwrap();
    let q1 = predictive_given_1(&model, &data, &x).unwrap().cov;
    assert!((lim - q1.norm()).abs() < 1e-9);
    assert!(
        rows.iter().all(|(_, disc)| *disc <= 1e-12 * lim),
        "{rows:?}"
    );

    let (rows, lim) = redundancy_limit_oracle(&model, &data, &x, &fresh, &[], &ladder).unwrap();
    for (eps, disc) in &rows {
        assert!(*disc <= 100.0 * eps * lim.max(1.0), "eps {eps}: {disc}");
    }

    let (rows, lim) = redundancy_limit_oracle(&model, &data, &x, &fresh, &dups, &ladder).unwrap();
    assert!(rows.windows(2).all(|w| w[1].1 < w[0].1), "{rows:?}");
    assert!(rows.last().unwrap().1 <= 1e-3 * lim);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn acquisition_gradients_match_differences(seed in any::<u64>()) {
        let inst = random_instance(seed, LIM).unwrap();
        let ctx = AcquisitionContext::new(&inst.model, &inst.data, &inst.target, &inst.noise).unwrap();
        let d = inst.x.len();
        let mut v = inst.x.clone();
        inst.batch.iter().for_each(|p| v.extend(p));
        let split = |v: &[f64]| -> (Vec<f64>, Vec<Vec<f64>>) {
            (v[..d].to_vec(), v[d..].chunks(d).map(<[f64]>::to_vec).collect())
        };
        for obj in [AcqObjective::Tad, AcqObjective::InformationGain] {
            let err = gradient_check(
                |p| {
                    let (x, b) = split(p);
                    ctx.value_and_grad(&x, &b, obj)
                },
                &v,
            )
            .unwrap();
            prop_assert!(err <= 1e-4, "{obj:?}: relative error {err}");
        }
    }
}
