//! One campaign plus its configuration: the single mutation path shared by
//! the command line and the HTTP service.

use serde::{Deserialize, Serialize};
use tad_core::campaign::{
    CampaignState, Ingested, IterationRecord, Outcome, PendingPhase, ProblemSpec, UncertaintyBox,
};
use tad_core::testbed::BenchmarkOracle;
use tad_core::TadError;

use crate::config::{CampaignConfig, OracleMode};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingView {
    pub phase: PendingPhase,
    pub points: Vec<Vec<f64>>,
}

/// Read-only view served to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub spec: ProblemSpec,
    pub oracle: OracleMode,
    pub iter: usize,
    pub passes: u64,
    pub outcome: Outcome,
    pub ttr: Vec<(f64, f64)>,
    pub ub: Option<UncertaintyBox>,
    pub x: Vec<f64>,
    pub n_kernels: usize,
    pub eig_counter: usize,
    pub eig_patience: usize,
    pub eig_threshold: f64,
    pub validation_threshold: f64,
    pub eig_history: Vec<f64>,
    pub p_value_history: Vec<f64>,
    pub total_samples: usize,
    pub pending: Option<PendingView>,
}

/// What one `advance` call did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepReport {
    Completed { record: Box<IterationRecord> },
    AwaitingObservations { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone)]
pub struct Session {
    pub config: CampaignConfig,
    pub state: CampaignState,
}

impl Session {
    pub fn new(config: CampaignConfig) -> Result<Self> {
        let state = config.build_state()?;
        Ok(Self { config, state })
    }

    fn oracle(&self) -> BenchmarkOracle {
        BenchmarkOracle::benchmark(self.config.noise_std(), self.config.seed)
    }

    /// Simulated mode: one full pass. Interactive mode: make sure a batch is
    /// pending and report it.
    pub fn advance(&mut self) -> Result<StepReport> {
        match self.config.oracle {
            OracleMode::Simulated => {
                let mut oracle = self.oracle();
                let record = self.state.step(&mut oracle)?;
                Ok(StepReport::Completed { record })
            }
            OracleMode::Interactive => {
                if self.state.pending.is_none() && self.state.outcome != Outcome::Running {
                    return Err(
                        TadError::AlreadyTerminated(format!("{:?}", self.state.outcome)).into(),
                    );
                }
                let points = self.state.propose()?;
                Ok(StepReport::AwaitingObservations { points })
            }
        }
    }

    /// Simulated passes until termination or `max_iters` iterations.
    pub fn run(&mut self, max_iters: usize) -> Result<Outcome> {
        if self.config.oracle != OracleMode::Simulated {
            return Err(CliError::Usage(
                "run needs a simulated campaign; use propose/ingest for interactive ones".into(),
            ));
        }
        let mut oracle = self.oracle();
        Ok(self.state.run(&mut oracle, max_iters)?)
    }

    pub fn propose(&mut self) -> Result<Vec<Vec<f64>>> {
        Ok(self.state.propose()?)
    }

    /// Feeds one row of `E` values per pending point.
    pub fn ingest_rows(&mut self, rows: &[Vec<f64>]) -> Result<Ingested> {
        let e = self.state.tasks();
        if let Some(bad) = rows.iter().find(|r| r.len() != e) {
            return Err(TadError::DimensionMismatch {
                context: "observation row",
                expected: e,
                actual: bad.len(),
            }
            .into());
        }
        self.ingest(&rows.concat())
    }

    pub fn ingest(&mut self, flat: &[f64]) -> Result<Ingested> {
        if self.state.pending.is_none() {
            return Err(CliError::NoPendingBatch);
        }
        let out = self.state.ingest(flat)?;
        self.state.oracle_calls += 1;
        Ok(out)
    }

    pub fn snapshot(&self) -> Snapshot {
        let s = &self.state;
        Snapshot {
            spec: s.spec.clone(),
            oracle: self.config.oracle,
            iter: s.iter,
            passes: s.passes,
            outcome: s.outcome,
            ttr: s.spec.ttr(),
            ub: s.history.last().map(|r| r.ub.clone()),
            x: s.x.clone(),
            n_kernels: s.n_kernels,
            eig_counter: s.conv.eig_counter,
            eig_patience: s.conv.eig_patience,
            eig_threshold: s.conv.eig_threshold,
            validation_threshold: s.settings.validation_threshold,
            eig_history: s
                .history
                .iter()
                .filter(|r| r.convergence_checked)
                .map(|r| r.eig_nats)
                .collect(),
            p_value_history: s.history.iter().map(|r| r.validation.p_value).collect(),
            total_samples: s.data.len(),
            pending: s.pending.as_ref().map(|p| PendingView {
                phase: p.phase,
                points: p.points.clone(),
            }),
        }
    }
}
