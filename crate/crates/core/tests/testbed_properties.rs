use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tad_core::campaign::Oracle;
use tad_core::testbed::{eval_test_function, simulated_oracle, SimulatedOracle};

/// Second transcription, written from the printed expressions term by term.
fn transcribed(d1: f64, d2: f64) -> (f64, f64) {
    let bump = |a: f64, b: f64| f64::exp(-(a * a) - b * b);
    let shared = bump(d1, d2);
    let drift = d1 + d2 / 2.0;
    let v1 = 3.0 * (1.0 - d1) * (1.0 - d1) * bump(d1, d2 + 1.0)
        + 10.0 * (d2 * d2 * d2 * d2 * d2 + d1 * d1 * d1 - 0.2 * d1) * shared
        - 3.0 * bump(d1 + 2.0, d2)
        + drift;
    let v2 = 3.0 * (1.0 + d2) * (1.0 + d2) * bump(d1 + 1.0, d2)
        + 10.0 * (0.2 * d2 - d2 * d2 * d2 - d1 * d1 * d1 * d1 * d1) * shared
        - 3.0 * bump(d1, 2.0 - d2)
        + drift;
    (v1, v2)
}

#[test]
fn two_transcriptions_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0));
        let v = eval_test_function(&[a, b]);
        let (w1, w2) = transcribed(a, b);
        assert!(
            (v[0] - w1).abs() <= 1e-12 && (v[1] - w2).abs() <= 1e-12,
            "at ({a}, {b})"
        );
    }
}

#[test]
fn noise_has_requested_scale_and_no_bias() {
    let std = [0.2, 0.05];
    let p = vec![vec![0.4, -1.1]; 10_000];
    let obs = simulated_oracle(&p, &std, 42);
    let truth = eval_test_function(&p[0]);
    for k in 0..2 {
        let r: Vec<f64> = obs.chunks(2).map(|c| c[k] - truth[k]).collect();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let sd = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / std[k] - 1.0).abs() < 0.05, "sd {sd}");
        assert!(mean.abs() < 4.0 * std[k] / n.sqrt(), "mean {mean}");
    }
}

#[test]
fn oracle_streams_are_per_call() {
    let pts = vec![vec![0.0, 0.0], vec![1.0, -1.0]];
    let mut a = SimulatedOracle::benchmark(vec![0.1, 0.1], 7);
    let mut b = SimulatedOracle::benchmark(vec![0.1, 0.1], 7);
    let first = a.observe(&pts, 3).unwrap();
    b.observe(&pts, 0).unwrap();
    assert_eq!(b.observe(&pts, 3).unwrap(), first);
    assert_ne!(a.observe(&pts, 4).unwrap(), first);
}
