//! Campaign configuration documents and state construction.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tad_core::campaign::{
    initialize_campaign, CampaignSettings, CampaignState, ConvergenceConfig, ProblemSpec,
};
use tad_core::testbed::{benchmark_scenario, simulated_oracle, SUCCESS_TARGET};
use tad_core::Dataset;

use crate::error::{CliError, Result};
use crate::persist::parse_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Observations come from the built-in benchmark response plus noise.
    #[default]
    Simulated,
    /// Observations are supplied from outside (files or HTTP).
    Interactive,
}

/// Starting data. `observations` may be omitted in simulated mode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialDesign {
    pub points: Vec<Vec<f64>>,
    pub observations: Option<Vec<Vec<f64>>>,
}

fn default_max_iters() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub convergence: ConvergenceConfig,
    #[serde(default)]
    pub settings: CampaignSettings,
    #[serde(default)]
    pub oracle: OracleMode,
    #[serde(default)]
    pub seed: u64,
    /// Start point; defaults to the domain centre.
    #[serde(default)]
    pub start: Option<Vec<f64>>,
    pub initial_design: InitialDesign,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

impl CampaignConfig {
    /// The benchmark success configuration on `[-3, 3]²`.
    pub fn benchmark(seed: u64) -> Result<Self> {
        let sc = benchmark_scenario(SUCCESS_TARGET, [-2.0, 2.0], seed)?;
        let e = sc.spec.tasks();
        let observations = sc
            .init_design
            .observations()
            .chunks(e)
            .map(<[f64]>::to_vec)
            .collect();
        Ok(Self {
            problem: sc.spec,
            convergence: sc.conv,
            settings: sc.settings,
            oracle: OracleMode::Simulated,
            seed,
            start: Some(sc.x0),
            initial_design: InitialDesign {
                points: sc.init_design.points().to_vec(),
                observations: Some(observations),
            },
            max_iters: 60,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let cfg: Self = parse_json(&text, path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem.validate()?;
        self.settings.validate(self.problem.tasks())?;
        let d = self.problem.dim();
        let e = self.problem.tasks();
        if self.initial_design.points.is_empty() {
            return Err(CliError::Config("initial design has no points".into()));
        }
        if self.initial_design.points.iter().any(|p| p.len() != d) {
            return Err(CliError::Config(format!(
                "initial design points must have {d} coordinates"
            )));
        }
        if let Some(start) = &self.start {
            if start.len() != d {
                return Err(CliError::Config(format!(
                    "start point must have {d} coordinates"
                )));
            }
        }
        match (&self.initial_design.observations, self.oracle) {
            (Some(obs), _) => {
                if obs.len() != self.initial_design.points.len() || obs.iter().any(|g| g.len() != e)
                {
                    return Err(CliError::Config(format!(
                        "initial observations must be one row of {e} values per design point"
                    )));
                }
            }
            (None, OracleMode::Interactive) => {
                return Err(CliError::Config(
                    "interactive campaigns need observations for the initial design".into(),
                ));
            }
            (None, OracleMode::Simulated) => {}
        }
        if self.oracle == OracleMode::Simulated {
            self.check_simulated()?;
        }
        Ok(())
    }

    fn check_simulated(&self) -> Result<()> {
        if self.problem.dim() != 2 || self.problem.tasks() != 2 {
            return Err(CliError::Config(
                "simulated mode uses the built-in two-input, two-output benchmark".into(),
            ));
        }
        Ok(())
    }

    pub fn noise_std(&self) -> Vec<f64> {
        self.settings
            .noise_var(self.problem.tasks())
            .iter()
            .map(|v| v.sqrt())
            .collect()
    }

    pub fn start_point(&self) -> Vec<f64> {
        self.start.clone().unwrap_or_else(|| {
            self.problem
                .lower
                .iter()
                .zip(&self.problem.upper)
                .map(|(l, u)| 0.5 * (l + u))
                .collect()
        })
    }

    /// Fresh campaign state with the initial design observed.
    pub fn build_state(&self) -> Result<CampaignState> {
        self.validate()?;
        let e = self.problem.tasks();
        let points = self.initial_design.points.clone();
        let flat: Vec<f64> = match &self.initial_design.observations {
            Some(rows) => rows.concat(),
            None => simulated_oracle(&points, &self.noise_std(), self.seed ^ 0x5eed),
        };
        let noise: Vec<f64> = std::iter::repeat_n(self.settings.noise_var(e), points.len())
            .flatten()
            .collect();
        let design = Dataset::new(e, points, flat, noise)?;
        Ok(initialize_campaign(
            self.problem.clone(),
            self.convergence.clone(),
            self.settings.clone(),
            design,
            self.start_point(),
            self.seed,
        )?)
    }
}
