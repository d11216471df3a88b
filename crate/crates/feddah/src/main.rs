//! `feddah` command line: run one experiment, run an ablation grid, or
//! regenerate a summary from a run directory.
//!
//! On success each command prints a JSON document to stdout. On failure
//! it prints one machine-readable JSON error record to stderr and exits
//! nonzero.

use clap::{Parser, Subcommand};
use feddah::config::{ConfigFile, Overrides, RunSettings};
use feddah::error::{Error, Result};
use feddah::federation::{run_experiment, Mode};
use feddah::metrics::Summary;
use feddah::{artifacts, config, Real};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "feddah",
    version,
    about = "Deterministic federated continual-learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        /// TOML config file; omitted fields fall back to the benchmark plan.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Mode override: full, no_lr, no_ws, no_dahyper, fedavg_cl, local_only.
        #[arg(long)]
        mode: Option<String>,
        /// History-regularizer weight override for the unseen-task loss.
        #[arg(long)]
        beta: Option<f64>,
        /// Output root; artifacts land in <out>/<mode>/<seed>/.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a mode x seed grid and write a combined ablation report.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds (default: 42,43,44,45,46).
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated modes (default: the five-mode ablation grid).
        #[arg(long)]
        modes: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute summaries and trajectory CSVs for existing output.
    Report {
        /// A run directory holding metrics.csv, or an output root
        /// holding <mode>/<seed>/ run directories.
        #[arg(long)]
        dir: PathBuf,
        /// Mode label when a run directory does not reveal it.
        #[arg(long)]
        mode: Option<String>,
        /// Seed label when a run directory does not reveal it.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!(
            "{}",
            serde_json::json!({ "error": { "kind": e.kind(), "detail": e.to_string() } })
        );
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            mode,
            beta,
            out,
        } => {
            let settings = resolve_settings(config.as_deref(), seed, mode.as_deref(), beta, out)?;
            let summary = run_one(&settings.plan, &settings.out_dir)?;
            print!("{}", summary.to_json());
            Ok(())
        }
        Command::Ablate {
            config,
            seeds,
            modes,
            out,
        } => ablate(config.as_deref(), seeds.as_deref(), modes.as_deref(), out),
        Command::Report { dir, mode, seed } => report(&dir, mode.as_deref(), seed),
    }
}

fn resolve_settings(
    config: Option<&Path>,
    seed: Option<u64>,
    mode: Option<&str>,
    beta: Option<f64>,
    out: Option<PathBuf>,
) -> Result<RunSettings> {
    let file = match config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let flags = Overrides {
        seed,
        mode: mode.map(Mode::parse).transpose()?,
        beta,
        out_dir: out,
    };
    let env_out = std::env::var("FEDDAH_OUT").ok();
    config::resolve(&file, &flags, env_out.as_deref())
}

fn run_one(plan: &feddah::federation::ExperimentPlan, out_root: &Path) -> Result<Summary> {
    let result = run_experiment::<Real>(plan.clone())?;
    artifacts::write_run(&artifacts::run_dir(out_root, plan), &result)
}

fn ablate(
    config: Option<&Path>,
    seeds: Option<&str>,
    modes: Option<&str>,
    out: Option<PathBuf>,
) -> Result<()> {
    let seeds: Vec<u64> = match seeds {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed `{s}`")))
            })
            .collect::<Result<_>>()?,
        None => (42..47).collect(),
    };
    let modes: Vec<Mode> = match modes {
        Some(list) => list
            .split(',')
            .map(|s| Mode::parse(s.trim()))
            .collect::<Result<_>>()?,
        None => vec![
            Mode::Full,
            Mode::NoLr,
            Mode::NoWs,
            Mode::NoDahyper,
            Mode::FedavgCl,
        ],
    };
    if seeds.is_empty() || modes.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and mode".into()));
    }

    let mut summaries = Vec::new();
    let mut out_root = None;
    for &mode in &modes {
        for &seed in &seeds {
            let settings =
                resolve_settings(config, Some(seed), Some(mode.name()), None, out.clone())?;
            summaries.push(run_one(&settings.plan, &settings.out_dir)?);
            out_root.get_or_insert(settings.out_dir);
        }
    }

    let root = out_root.expect("at least one run");
    std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut doc = serde_json::to_string_pretty(&summaries).expect("summaries serialize");
    doc.push('\n');
    let path = root.join("ablation.json");
    std::fs::write(&path, &doc).map_err(|e| Error::io(&path, e))?;
    print!("{doc}");
    Ok(())
}

fn report(dir: &Path, mode: Option<&str>, seed: Option<u64>) -> Result<()> {
    if dir.join(artifacts::METRICS_FILE).is_file() {
        let summary = report_run(dir, mode, seed)?;
        print!("{}", summary.to_json());
        return Ok(());
    }
    report_grid(dir)
}

/// Regenerates one run's summary.json and per-task trajectory CSVs.
fn report_run(dir: &Path, mode: Option<&str>, seed: Option<u64>) -> Result<Summary> {
    let (mode, seed) = identify_run(dir, mode, seed)?;
    let summary = artifacts::recompute_summary(dir, &mode, seed)?;
    let path = dir.join(artifacts::SUMMARY_FILE);
    std::fs::write(&path, summary.to_json()).map_err(|e| Error::io(&path, e))?;
    artifacts::write_trajectories(dir)?;
    Ok(summary)
}

/// Reports over an output root of `<mode>/<seed>/` run directories:
/// regenerates every run's summary, then writes and prints a
/// mode-ordered final_average table.
fn report_grid(root: &Path) -> Result<()> {
    let mut table = Vec::new();
    for mode in Mode::all() {
        let mode_dir = root.join(mode.name());
        let mut seeds: Vec<u64> = match std::fs::read_dir(&mode_dir) {
            Ok(entries) => entries
                .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<u64>().ok())
                .collect(),
            Err(_) => continue,
        };
        seeds.sort_unstable();

        let mut per_seed = Vec::new();
        for seed in seeds {
            let run = mode_dir.join(seed.to_string());
            if !run.join(artifacts::METRICS_FILE).is_file() {
                continue;
            }
            let summary = report_run(&run, Some(mode.name()), Some(seed))?;
            per_seed.push(serde_json::json!({
                "seed": seed,
                "final_average": summary.final_average_loss,
            }));
        }
        if per_seed.is_empty() {
            continue;
        }
        let mean = per_seed
            .iter()
            .map(|s| s["final_average"].as_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            / per_seed.len() as f64;
        table.push(serde_json::json!({
            "mode": mode.name(),
            "final_average_mean": mean,
            "runs": per_seed,
        }));
    }
    if table.is_empty() {
        return Err(Error::Config(format!(
            "no run directories under `{}`: expected metrics.csv or <mode>/<seed>/ layout",
            root.display()
        )));
    }
    let mut doc = serde_json::to_string_pretty(&serde_json::json!({ "final_average": table }))
        .expect("report serializes");
    doc.push('\n');
    let path = root.join(artifacts::SUMMARY_FILE);
    std::fs::write(&path, &doc).map_err(|e| Error::io(&path, e))?;
    print!("{doc}");
    Ok(())
}

/// Determines the mode and seed labels for a run directory: explicit
/// flags win, then an existing summary.json, then the `<mode>/<seed>`
/// path convention.
fn identify_run(dir: &Path, mode: Option<&str>, seed: Option<u64>) -> Result<(String, u64)> {
    if let (Some(m), Some(s)) = (mode, seed) {
        return Ok((m.to_string(), s));
    }
    let from_summary = artifacts::read_summary(dir).ok();
    let from_path = || -> Option<(String, u64)> {
        let seed = dir.file_name()?.to_str()?.parse::<u64>().ok()?;
        let mode = dir.parent()?.file_name()?.to_str()?;
        Mode::parse(mode).ok()?;
        Some((mode.to_string(), seed))
    };
    let inferred = from_summary
        .map(|s| (s.mode, s.seed))
        .or_else(from_path)
        .ok_or_else(|| {
            Error::Config(
                "cannot identify run: pass --mode and --seed, or point at a <mode>/<seed> directory"
                    .into(),
            )
        })?;
    Ok((
        mode.map(str::to_string).unwrap_or(inferred.0),
        seed.unwrap_or(inferred.1),
    ))
}
