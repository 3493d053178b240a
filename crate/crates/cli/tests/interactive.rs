use tad_cli::{CampaignConfig, CliError, OracleMode, Session, StepReport};
use tad_core::campaign::{Ingested, Oracle};
use tad_core::testbed::SimulatedOracle;

#[test]
fn interactive_campaign_matches_simulated_one() {
    let mut simulated = Session::new(CampaignConfig::benchmark(6).unwrap()).unwrap();
    for _ in 0..3 {
        simulated.advance().unwrap();
    }

    let mut cfg = CampaignConfig::benchmark(6).unwrap();
    cfg.oracle = OracleMode::Interactive;
    let mut lab = SimulatedOracle::benchmark(cfg.noise_std(), cfg.seed);
    let mut s = Session::new(cfg).unwrap();
    assert!(matches!(s.run(5), Err(CliError::Usage(_))));
    let mut completed = 0;
    while completed < 3 {
        let StepReport::AwaitingObservations { points } = s.advance().unwrap() else {
            panic!("interactive advance must only propose");
        };
        let rows: Vec<Vec<f64>> = lab
            .observe(&points, s.state.oracle_calls)
            .unwrap()
            .chunks(2)
            .map(<[f64]>::to_vec)
            .collect();
        if let Ingested::Completed(_) = s.ingest_rows(&rows).unwrap() {
            completed += 1;
        }
    }
    assert_eq!(s.state.history, simulated.state.history);
    assert_eq!(s.state.data, simulated.state.data);
    assert_eq!(s.state.model, simulated.state.model);
    assert!(matches!(
        s.ingest(&[0.0, 0.0]),
        Err(CliError::NoPendingBatch)
    ));
}

#[test]
fn bad_rows_leave_the_batch_pending() {
    let mut cfg = CampaignConfig::benchmark(1).unwrap();
    cfg.oracle = OracleMode::Interactive;
    let mut s = Session::new(cfg).unwrap();
    let pending = s.propose().unwrap();
    assert_eq!(pending.len(), 3);
    assert!(s.ingest_rows(&vec![vec![0.0, 0.0]; 2]).is_err());
    assert!(s.ingest_rows(&vec![vec![0.0]; 3]).is_err());
    assert_eq!(s.state.pending_points().unwrap(), pending.as_slice());
    assert_eq!(s.state.oracle_calls, 0);
}
