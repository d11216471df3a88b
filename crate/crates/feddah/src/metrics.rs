//! Metric aggregation and artifact text formats.
//!
//! This module owns the textual artifacts an experiment produces: the
//! per-round evaluation table (`metrics.csv`), the per-update record
//! stream (`rounds.jsonl`), and the end-of-run summary (`summary.json`).
//! Rendering is deterministic: fixed column order, shortest round-trip
//! float formatting, and sorted maps, so equal results give equal bytes.

use crate::amr::TaskRecord;
use crate::error::{Error, Result};
use crate::federation::{MetricRow, SERVER_CLIENT_ID};
use serde::Serialize;
use std::collections::BTreeMap;

// ─── metrics.csv ────────────────────────────────────────────────────────

pub const METRICS_HEADER: &str = "round,client_id,eval_task_id,test_loss,test_accuracy";

/// Renders evaluation rows in their given order. The accuracy column is
/// empty for regression rows.
pub fn render_metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(32 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.round.to_string());
        out.push(',');
        out.push_str(&r.client_id);
        out.push(',');
        out.push_str(&r.task_id);
        out.push(',');
        out.push_str(&r.test_loss.to_string());
        out.push(',');
        if let Some(a) = r.test_accuracy {
            out.push_str(&a.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parses what [`render_metrics_csv`] writes. `source` names the input in
/// error messages.
pub fn parse_metrics_csv(text: &str, source: &str) -> Result<Vec<MetricRow>> {
    let bad = |line_no: usize, detail: String| Error::Artifact {
        path: source.to_string().into(),
        detail: format!("line {line_no}: {detail}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        Some((_, h)) => return Err(bad(1, format!("unexpected header `{h}`"))),
        None => return Err(bad(1, "empty file".to_string())),
    }
    let mut rows = Vec::new();
    for (ix, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = ix + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad(line_no, format!("expected 5 fields, got {}", fields.len())));
        }
        let round: u64 = fields[0]
            .parse()
            .map_err(|e| bad(line_no, format!("round: {e}")))?;
        let test_loss: f64 = fields[3]
            .parse()
            .map_err(|e| bad(line_no, format!("test_loss: {e}")))?;
        let test_accuracy = if fields[4].is_empty() {
            None
        } else {
            Some(
                fields[4]
                    .parse()
                    .map_err(|e| bad(line_no, format!("test_accuracy: {e}")))?,
            )
        };
        rows.push(MetricRow {
            round,
            client_id: fields[1].to_string(),
            task_id: fields[2].to_string(),
            test_loss,
            test_accuracy,
        });
    }
    Ok(rows)
}

// ─── rounds.jsonl ───────────────────────────────────────────────────────

/// One JSON object per line, in record order.
pub fn render_records_jsonl(records: &[TaskRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Minimal view of one `rounds.jsonl` line, for analysis and checks.
#[derive(Clone, Debug, serde::Deserialize)]
pub struct ParsedRecord {
    pub round: u64,
    pub task_id: String,
    pub client_ids: Vec<String>,
    pub w_s: Option<f64>,
    pub l_task_hist: Option<f64>,
    pub l_task_upload: f64,
    pub l_r1: Option<f64>,
    pub l_r2: f64,
    pub total_loss: f64,
    pub delta_norm: f64,
}

pub fn parse_records_jsonl(text: &str, source: &str) -> Result<Vec<ParsedRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(ix, line)| {
            serde_json::from_str(line).map_err(|e| Error::Artifact {
                path: source.to_string().into(),
                detail: format!("line {}: {e}", ix + 1),
            })
        })
        .collect()
}

// ─── aggregation ────────────────────────────────────────────────────────

/// Per-series trajectory: ordered `(round, loss)` points for one
/// `(client, task)` pair.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub points: Vec<(u64, f64)>,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.points.last().map(|&(_, l)| l).unwrap_or(f64::NAN)
    }

    pub fn best_loss(&self) -> f64 {
        self.points
            .iter()
            .map(|&(_, l)| l)
            .fold(f64::INFINITY, f64::min)
    }

    /// How much worse the final loss is than the best the series ever
    /// reached, floored at zero.
    pub fn forgetting(&self) -> f64 {
        (self.final_loss() - self.best_loss()).max(0.0)
    }
}

/// All client trajectories of one run, keyed `(client_id, task_id)`.
/// Rows of the server pseudo client are kept separately.
#[derive(Clone, Debug, Default)]
pub struct TrajectorySet {
    pub client: BTreeMap<(String, String), Trajectory>,
    pub server: BTreeMap<String, Trajectory>,
}

/// Groups rows into per-pair trajectories, ordering each by round.
pub fn trajectories(rows: &[MetricRow]) -> TrajectorySet {
    let mut set = TrajectorySet::default();
    for r in rows {
        if r.client_id == SERVER_CLIENT_ID {
            set.server
                .entry(r.task_id.clone())
                .or_default()
                .points
                .push((r.round, r.test_loss));
        } else {
            set.client
                .entry((r.client_id.clone(), r.task_id.clone()))
                .or_default()
                .points
                .push((r.round, r.test_loss));
        }
    }
    for t in set.client.values_mut().chain(set.server.values_mut()) {
        t.points.sort_by_key(|&(round, _)| round);
    }
    set
}

/// End-of-run aggregate written as `summary.json`.
///
/// Aggregates cover client rows only; rows of the server pseudo client
/// are excluded so numbers stay comparable across modes that have no
/// server-side models. `final_average_loss` is the mean test loss over
/// every `(client, task)` pair at its last evaluated round;
/// `mean_forgetting` weights every pair equally; `per_task_forgetting`
/// averages each task over the clients that saw it.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
pub struct Summary {
    pub mode: String,
    pub seed: u64,
    pub rounds: u64,
    pub final_average_loss: f64,
    pub mean_forgetting: f64,
    pub per_task_forgetting: BTreeMap<String, f64>,
    pub final_mean_accuracy: Option<f64>,
    /// Final-round test loss per client per task.
    pub final_client_task_loss: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn summarize(rows: &[MetricRow], mode: &str, seed: u64) -> Result<Summary> {
    let set = trajectories(rows);
    if set.client.is_empty() {
        return Err(Error::Config("no client evaluation rows to summarize".into()));
    }
    let pairs = set.client.len() as f64;
    let final_average_loss = set.client.values().map(Trajectory::final_loss).sum::<f64>() / pairs;
    let mean_forgetting = set.client.values().map(Trajectory::forgetting).sum::<f64>() / pairs;

    let mut per_task: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ((_, task), t) in &set.client {
        let e = per_task.entry(task.clone()).or_insert((0.0, 0));
        e.0 += t.forgetting();
        e.1 += 1;
    }
    let per_task_forgetting = per_task
        .into_iter()
        .map(|(task, (sum, n))| (task, sum / n as f64))
        .collect();

    let rounds = rows.iter().map(|r| r.round).max().unwrap_or(0) + 1;
    let last_round = rounds - 1;
    let accs: Vec<f64> = rows
        .iter()
        .filter(|r| r.client_id != SERVER_CLIENT_ID && r.round == last_round)
        .filter_map(|r| r.test_accuracy)
        .collect();
    let final_mean_accuracy = if accs.is_empty() {
        None
    } else {
        Some(accs.iter().sum::<f64>() / accs.len() as f64)
    };

    let mut final_client_task_loss: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((client, task), t) in &set.client {
        final_client_task_loss
            .entry(client.clone())
            .or_default()
            .insert(task.clone(), t.final_loss());
    }

    Ok(Summary {
        mode: mode.to_string(),
        seed,
        rounds,
        final_average_loss,
        mean_forgetting,
        per_task_forgetting,
        final_mean_accuracy,
        final_client_task_loss,
    })
}

impl Summary {
    /// Pretty JSON with a trailing newline; key order is fixed by the
    /// struct and the sorted map.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

/// One CSV per task with every client's loss trajectory on it, for
/// external plotting. Rows are ordered by round, then client id.
pub fn trajectory_csvs(rows: &[MetricRow]) -> BTreeMap<String, String> {
    let mut by_task: BTreeMap<String, Vec<&MetricRow>> = BTreeMap::new();
    for r in rows {
        by_task.entry(r.task_id.clone()).or_default().push(r);
    }
    by_task
        .into_iter()
        .map(|(task, mut rows)| {
            rows.sort_by(|a, b| (a.round, &a.client_id).cmp(&(b.round, &b.client_id)));
            let mut out = String::from("round,client_id,test_loss\n");
            for r in rows {
                out.push_str(&format!("{},{},{}\n", r.round, r.client_id, r.test_loss));
            }
            (task, out)
        })
        .collect()
}
