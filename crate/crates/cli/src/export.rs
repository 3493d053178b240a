//! CSV export of the iteration history and of the sampled data.

use std::path::{Path, PathBuf};

use tad_core::campaign::{Branch, CampaignState, Outcome};

use crate::error::{CliError, Result};

pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const SAMPLES_FILE: &str = "samples.csv";

pub fn iteration_header(dim: usize, tasks: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "pass",
        "iter",
        "branch",
        "log_det_term",
        "data_fit_term",
        "trace_term",
        "tad_total",
        "eig_nats",
        "p_value",
        "q_statistic",
        "n_kernels",
        "eig_counter",
        "total_samples",
        "outcome",
    ]
    .map(String::from)
    .to_vec();
    h.extend((0..dim).map(|d| format!("x_{d}")));
    h.extend((0..tasks).map(|k| format!("ub_center_{k}")));
    h.extend((0..tasks).map(|k| format!("ub_half_width_{k}")));
    h
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Accepted => "accepted",
        Branch::Alert => "alert",
        Branch::Alarm => "alarm",
    }
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Running => "running",
        Outcome::Success => "success",
        Outcome::Failure => "failure",
    }
}

/// Writes `iterations.csv` and `samples.csv` into `dir`, returning their paths.
pub fn export_history(state: &CampaignState, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if state.history.is_empty() {
        return Err(CliError::Usage(
            "campaign has no completed iterations to export".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let (d, e) = (state.spec.dim(), state.spec.tasks());

    let it_path = dir.join(ITERATIONS_FILE);
    let mut w = csv::Writer::from_path(&it_path)?;
    w.write_record(iteration_header(d, e))?;
    for r in &state.history {
        let b = &r.breakdown;
        let mut row = vec![
            r.pass.to_string(),
            r.iter.to_string(),
            branch_name(r.branch).to_string(),
            b.log_det_term.to_string(),
            b.data_fit_term.to_string(),
            b.trace_term.to_string(),
            b.total.to_string(),
            r.eig_nats.to_string(),
            r.validation.p_value.to_string(),
            r.validation.statistic.to_string(),
            r.n_kernels.to_string(),
            r.eig_counter.to_string(),
            r.total_samples.to_string(),
            outcome_name(r.outcome).to_string(),
        ];
        row.extend(r.x.iter().map(f64::to_string));
        row.extend(r.ub.center.iter().map(f64::to_string));
        row.extend(r.ub.half_widths.iter().map(f64::to_string));
        w.write_record(row)?;
    }
    w.flush().map_err(|err| CliError::io(&it_path, err))?;

    let s_path = dir.join(SAMPLES_FILE);
    let mut w = csv::Writer::from_path(&s_path)?;
    let mut header = vec!["index".to_string()];
    header.extend((0..d).map(|k| format!("x_{k}")));
    header.extend((0..e).map(|k| format!("g_{k}")));
    w.write_record(header)?;
    for (i, p) in state.data.points().iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.iter().map(f64::to_string));
        row.extend(state.data.observation(i).iter().map(f64::to_string));
        w.write_record(row)?;
    }
    w.flush().map_err(|err| CliError::io(&s_path, err))?;
    Ok((it_path, s_path))
}

/// Reads an observation file: one row per pending point, `E` numeric columns.
pub fn read_observations_csv(path: &Path, rows: usize, tasks: usize) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut out = Vec::with_capacity(rows * tasks);
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != tasks {
            return Err(CliError::Usage(format!(
                "observation row {} has {} values, expected {tasks}",
                n + 1,
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Usage(format!(
                    "observation row {} has non-numeric value {field:?}",
                    n + 1
                ))
            })?;
            out.push(v);
        }
        n += 1;
    }
    if n != rows {
        return Err(CliError::Usage(format!(
            "expected {rows} observation rows, found {n}"
        )));
    }
    Ok(out)
}
