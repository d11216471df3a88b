//! On-disk layout of a finished run and helpers to write and reread it.
//!
//! A run directory is `<out>/<mode>/<seed>/` and contains exactly:
//! `metrics.csv`, `rounds.jsonl`, `checkpoint.fdah`, `summary.json`.
//! All four files are a pure function of the experiment plan, so a rerun
//! rewrites identical bytes.

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::federation::{ExperimentPlan, ExperimentResult};
use crate::metrics::{self, Summary};
use crate::Real;
use std::path::{Path, PathBuf};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RECORDS_FILE: &str = "rounds.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.fdah";
pub const SUMMARY_FILE: &str = "summary.json";

/// Directory for one run inside the output root.
pub fn run_dir(out_root: &Path, plan: &ExperimentPlan) -> PathBuf {
    out_root.join(plan.mode.name()).join(plan.seed.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the four run artifacts into `dir`, creating it as needed, and
/// returns the computed summary.
pub fn write_run(dir: &Path, result: &ExperimentResult<Real>) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let plan = result.simulation.plan();

    write_file(
        &dir.join(METRICS_FILE),
        metrics::render_metrics_csv(&result.metrics).as_bytes(),
    )?;
    write_file(
        &dir.join(RECORDS_FILE),
        metrics::render_records_jsonl(&result.records).as_bytes(),
    )?;
    checkpoint::save(
        &dir.join(CHECKPOINT_FILE),
        &checkpoint::checkpoint_of_server(result.simulation.server()),
    )?;

    let summary = metrics::summarize(&result.metrics, plan.mode.name(), plan.seed)?;
    write_file(&dir.join(SUMMARY_FILE), summary.to_json().as_bytes())?;
    Ok(summary)
}

/// Recomputes the summary for an existing run directory from its
/// `metrics.csv`, also validating the checkpoint when one is present.
pub fn recompute_summary(dir: &Path, mode: &str, seed: u64) -> Result<Summary> {
    let metrics_path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let rows = metrics::parse_metrics_csv(&text, &metrics_path.display().to_string())?;

    let cp_path = dir.join(CHECKPOINT_FILE);
    if cp_path.exists() {
        checkpoint::load(&cp_path)?;
    }
    metrics::summarize(&rows, mode, seed)
}

/// Reads and parses `metrics.csv` from a run directory.
pub fn read_metrics(dir: &Path) -> Result<Vec<crate::federation::MetricRow>> {
    let path = dir.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    metrics::parse_metrics_csv(&text, &path.display().to_string())
}

/// File name for one task's trajectory CSV; task ids are sanitized so
/// every id maps to a portable file name.
pub fn trajectory_file(task_id: &str) -> String {
    let safe: String = task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect();
    format!("trajectory_{safe}.csv")
}

/// Writes one per-task trajectory CSV per task into the run directory
/// and returns the file names written.
pub fn write_trajectories(dir: &Path) -> Result<Vec<String>> {
    let rows = read_metrics(dir)?;
    let mut names = Vec::new();
    for (task_id, csv) in metrics::trajectory_csvs(&rows) {
        let name = trajectory_file(&task_id);
        write_file(&dir.join(&name), csv.as_bytes())?;
        names.push(name);
    }
    Ok(names)
}

/// Reads `summary.json` from a run directory.
pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Artifact {
        path,
        detail: e.to_string(),
    })
}
