use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tad_cli::export::{export_history, read_observations_csv};
use tad_cli::server::{serve, AppState};
use tad_cli::{load_state, save_state, CampaignConfig, CliError, Result, Session, StepReport};
use tad_core::campaign::{Ingested, Outcome};

const EXIT_FAILURE_OUTCOME: u8 = 10;
const EXIT_MAX_ITERS: u8 = 11;

#[derive(Parser)]
#[command(name = "tad", version, about = "Targeted adaptive design campaigns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the benchmark configuration as a starting point.
    Init {
        #[arg(long, default_value = "campaign.json")]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a simulated campaign to completion.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Advance by one iteration (simulated) or emit the next batch (interactive).
    Step {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the pending batch as CSV.
    Propose {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Read observations for the pending batch from a CSV file.
    Ingest {
        #[arg(long)]
        state: PathBuf,
        /// One row per pending point, one column per design component.
        file: PathBuf,
    },
    /// Print a JSON snapshot of the campaign.
    Status {
        #[arg(long)]
        state: PathBuf,
    },
    /// Write iterations.csv and samples.csv.
    Export {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Campaign to host as id 1, persisted after every mutation.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 64 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn outcome_code(o: Outcome) -> u8 {
    match o {
        Outcome::Failure => EXIT_FAILURE_OUTCOME,
        Outcome::Success | Outcome::Running => 0,
    }
}

/// Loads `state` if it exists, otherwise starts from `config`.
fn open(config: Option<&Path>, state: Option<&Path>, seed: Option<u64>) -> Result<Session> {
    if let Some(path) = state.filter(|p| p.exists()) {
        if config.is_some() {
            return Err(CliError::Usage(format!(
                "{} already exists; drop --config to resume it",
                path.display()
            )));
        }
        let (config, state) = load_state(path)?.into_parts();
        return Ok(Session { config, state });
    }
    let Some(config) = config else {
        return Err(CliError::Usage(
            "need --config or an existing --state file".into(),
        ));
    };
    let mut cfg = CampaignConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Session::new(cfg)
}

fn persist(session: &Session, state: Option<&Path>) -> Result<()> {
    match state {
        Some(p) => save_state(&session.config, &session.state, p),
        None => Ok(()),
    }
}

fn print_points(points: &[Vec<f64>]) {
    for p in points {
        let row: Vec<String> = p.iter().map(f64::to_string).collect();
        println!("{}", row.join(","));
    }
}

fn dispatch(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Init { config, seed } => {
            let cfg = CampaignConfig::benchmark(seed.unwrap_or(0))?;
            let text =
                serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            std::fs::write(&config, text + "\n").map_err(|e| CliError::io(&config, e))?;
            println!("wrote {}", config.display());
            Ok(0)
        }
        Command::Run {
            config,
            state,
            seed,
            max_iters,
            out,
        } => {
            let mut s = open(config.as_deref(), state.as_deref(), seed)?;
            let max_iters = max_iters.unwrap_or(s.config.max_iters);
            let result = s.run(max_iters);
            persist(&s, state.as_deref())?;
            let outcome = result?;
            if let Some(dir) = out {
                export_history(&s.state, &dir)?;
            }
            let st = &s.state;
            println!(
                "outcome {:?} after {} iterations, {} samples, {} kernel components",
                outcome,
                st.iter,
                st.data.len(),
                st.n_kernels
            );
            Ok(match outcome {
                Outcome::Running => EXIT_MAX_ITERS,
                o => outcome_code(o),
            })
        }
        Command::Step {
            config,
            state,
            seed,
        } => {
            let mut s = open(config.as_deref(), Some(&state), seed)?;
            let report = s.advance();
            persist(&s, Some(&state))?;
            match report? {
                StepReport::Completed { record } => println!(
                    "iter {} {:?}: EIG {:.3e} p {:.3} outcome {:?}",
                    record.iter,
                    record.branch,
                    record.eig_nats,
                    record.validation.p_value,
                    record.outcome
                ),
                StepReport::AwaitingObservations { points } => print_points(&points),
            }
            Ok(outcome_code(s.state.outcome))
        }
        Command::Propose {
            config,
            state,
            seed,
        } => {
            let mut s = open(config.as_deref(), Some(&state), seed)?;
            let points = s.propose();
            persist(&s, Some(&state))?;
            print_points(&points?);
            Ok(0)
        }
        Command::Ingest { state, file } => {
            let mut s = open(None, Some(&state), None)?;
            let rows = s
                .state
                .pending_points()
                .map(<[_]>::len)
                .ok_or(CliError::NoPendingBatch)?;
            let obs = read_observations_csv(&file, rows, s.state.tasks())?;
            let res = s.ingest(&obs)?;
            persist(&s, Some(&state))?;
            match res {
                Ingested::Initialized => println!("initial batch recorded"),
                Ingested::NeedTarget => println!("batch recorded; the target point is now pending"),
                Ingested::Completed(r) => println!(
                    "iter {} {:?}: p {:.3} outcome {:?}",
                    r.iter, r.branch, r.validation.p_value, r.outcome
                ),
            }
            Ok(outcome_code(s.state.outcome))
        }
        Command::Status { state } => {
            let s = open(None, Some(&state), None)?;
            let text = serde_json::to_string_pretty(&s.snapshot())
                .map_err(|e| CliError::Config(e.to_string()))?;
            println!("{text}");
            Ok(outcome_code(s.state.outcome))
        }
        Command::Export { state, out } => {
            let s = open(None, Some(&state), None)?;
            let (a, b) = export_history(&s.state, &out)?;
            println!("wrote {} and {}", a.display(), b.display());
            Ok(0)
        }
        Command::Serve {
            port,
            state,
            config,
        } => {
            let app = AppState::new();
            if state.is_some() || config.is_some() {
                let s = open(config.as_deref(), state.as_deref(), None)?;
                persist(&s, state.as_deref())?;
                app.insert(s, state);
            }
            let rt =
                tokio::runtime::Runtime::new().map_err(|e| CliError::io("tokio runtime", e))?;
            rt.block_on(serve(app, port))
                .map_err(|e| CliError::io(format!("port {port}"), e))?;
            Ok(0)
        }
    }
}
