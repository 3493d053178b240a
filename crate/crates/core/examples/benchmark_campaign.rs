//! Runs one simulated campaign on the benchmark function and prints a trace.
//!
//! Usage: benchmark_campaign [success|failure] [seed] [max_iters]

use std::time::Instant;

use tad_core::campaign::initialize_campaign;
use tad_core::testbed::{
    benchmark_scenario, eval_test_function, SimulatedOracle, FAILURE_TARGET, SUCCESS_TARGET,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("success");
    let seed: u64 = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let max_iters: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(400);
    let (target, x0) = match mode {
        "failure" => (FAILURE_TARGET, [2.0, 2.0]),
        _ => (SUCCESS_TARGET, [-2.0, 2.0]),
    };
    let sc = benchmark_scenario(target, x0, seed)?;
    let mut oracle = SimulatedOracle::benchmark(sc.settings.noise_std.clone(), seed);
    let mut state =
        initialize_campaign(sc.spec, sc.conv, sc.settings, sc.init_design, sc.x0, seed)?;
    let start = Instant::now();
    while state.outcome == tad_core::campaign::Outcome::Running
        && (state.check_model || state.iter < max_iters)
    {
        let t = Instant::now();
        let r = state.step(&mut oracle)?;
        println!(
            "pass {:3} iter {:3} {:?} P={} x=({:+.4},{:+.4}) L={:+.3} EIG={:.2e} p={:.3} hw=({:.4},{:.4}) ctr=({:+.4},{:+.4}) n_I={} N={} {:.2}s",
            r.pass, r.iter, r.branch, r.n_kernels, r.x[0], r.x[1], r.breakdown.total, r.eig_nats,
            r.validation.p_value, r.ub.half_widths[0], r.ub.half_widths[1], r.ub.center[0], r.ub.center[1],
            r.eig_counter, r.total_samples, t.elapsed().as_secs_f64()
        );
    }
    let f = eval_test_function(&state.x);
    println!(
        "outcome {:?} iter {} samples {} P {} x ({:.4},{:.4}) f ({:.4},{:.4}) in {:.1}s",
        state.outcome,
        state.iter,
        state.data.len(),
        state.n_kernels,
        state.x[0],
        state.x[1],
        f[0],
        f[1],
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
