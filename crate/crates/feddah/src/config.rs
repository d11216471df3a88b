//! Experiment configuration: TOML file plus CLI/env overrides.
//!
//! Precedence, highest first: command-line flags, the `FEDDAH_OUT`
//! environment variable (output directory only), the config file, then
//! the built-in benchmark plan. Unknown keys in the file are rejected.

use crate::client::TaskLabel;
use crate::error::{Error, Result};
use crate::federation::{ExperimentPlan, Mode};
use serde::Deserialize;
use std::path::{Path, PathBuf};

/// Raw config-file contents; every field optional so the file only has
/// to name what it changes.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub clients: Option<usize>,
    pub epochs: Option<usize>,
    pub rounds_per_task: Option<usize>,
    pub n_z: Option<usize>,
    pub hidden: Option<usize>,
    pub mu_spacing: Option<f64>,
    pub sigma: Option<f64>,
    pub beta: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub n_inner: Option<usize>,
    pub n_server: Option<usize>,
    pub lr_client: Option<f64>,
    pub lr_server: Option<f64>,
    pub bins: Option<usize>,
    pub smoothing: Option<f64>,
    pub model_dims: Option<Vec<usize>>,
    pub shared_initial: Option<Vec<String>>,
    pub shared: Option<Vec<String>>,
    pub unique: Option<Vec<String>>,
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    pub train_noise: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Flag-level overrides collected by the CLI.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub beta: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

/// Fully resolved settings for one experiment.
#[derive(Clone, Debug)]
pub struct RunSettings {
    pub plan: ExperimentPlan,
    pub out_dir: PathBuf,
}

fn parse_labels(kind: &str, raw: &[String]) -> Result<Vec<TaskLabel>> {
    raw.iter()
        .map(|s| {
            TaskLabel::parse(s).map_err(|e| Error::Config(format!("{kind} task `{s}`: {e}")))
        })
        .collect()
}

/// Merges file contents and CLI flags onto the benchmark defaults and
/// validates the result. `env_out` carries `FEDDAH_OUT` when set.
pub fn resolve(
    file: &ConfigFile,
    flags: &Overrides,
    env_out: Option<&str>,
) -> Result<RunSettings> {
    let seed = flags.seed.or(file.seed).unwrap_or(42);
    let mode = match (&flags.mode, &file.mode) {
        (Some(m), _) => *m,
        (None, Some(name)) => Mode::parse(name)?,
        (None, None) => Mode::Full,
    };
    let mut plan = ExperimentPlan::benchmark(seed, mode);

    macro_rules! copy {
        ($($field:ident),*) => {
            $(if let Some(v) = file.$field { plan.$field = v; })*
        };
    }
    copy!(
        clients,
        epochs,
        rounds_per_task,
        n_z,
        hidden,
        mu_spacing,
        sigma,
        beta,
        beta1,
        beta2,
        n_inner,
        n_server,
        lr_client,
        lr_server,
        bins,
        smoothing,
        train_samples,
        test_samples,
        train_noise
    );
    if let Some(dims) = &file.model_dims {
        plan.model_dims = dims.clone();
    }
    if let Some(raw) = &file.shared_initial {
        plan.shared_initial = parse_labels("shared_initial", raw)?;
    }
    if let Some(raw) = &file.shared {
        plan.shared = parse_labels("shared", raw)?;
    }
    if let Some(raw) = &file.unique {
        plan.unique = parse_labels("unique", raw)?;
    }
    if let Some(b) = flags.beta {
        plan.beta = b;
    }
    plan.validate()?;

    let out_dir = flags
        .out_dir
        .clone()
        .or_else(|| env_out.map(PathBuf::from))
        .or_else(|| file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(RunSettings { plan, out_dir })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_runnable_benchmark() {
        let s = resolve(&ConfigFile::default(), &Overrides::default(), None).unwrap();
        assert_eq!(s.plan.seed, 42);
        assert_eq!(s.plan.mode, Mode::Full);
        assert_eq!(s.plan.epochs, 5);
        assert_eq!(s.plan.rounds_per_task, 20);
        assert!(!s.plan.task_list().is_empty());
        assert_eq!(s.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn file_fields_override_defaults() {
        let file = ConfigFile::parse(
            r#"
seed = 7
mode = "no_ws"
clients = 2
beta = 0.5
model_dims = [2, 4, 1]
shared_initial = ["sine:a"]
shared = ["poly:b"]
unique = ["sine:c", "poly:d"]
train_samples = 8
test_samples = 4
out_dir = "elsewhere"
"#,
        )
        .unwrap();
        let s = resolve(&file, &Overrides::default(), None).unwrap();
        assert_eq!(s.plan.seed, 7);
        assert_eq!(s.plan.mode, Mode::NoWs);
        assert_eq!(s.plan.clients, 2);
        assert_eq!(s.plan.beta, 0.5);
        assert_eq!(s.plan.model_dims, vec![2, 4, 1]);
        assert_eq!(s.plan.task_list().len(), 4);
        assert_eq!(s.out_dir, PathBuf::from("elsewhere"));
        // Untouched fields keep benchmark defaults.
        assert_eq!(s.plan.epochs, 5);
        assert_eq!(s.plan.lr_client, 1e-3);
    }

    #[test]
    fn precedence_is_flags_then_env_then_file() {
        let file = ConfigFile::parse("seed = 5\nbeta = 0.01\nout_dir = \"from_file\"").unwrap();
        let flags = Overrides {
            seed: Some(9),
            mode: Some(Mode::FedavgCl),
            beta: Some(0.05),
            out_dir: None,
        };
        let s = resolve(&file, &flags, Some("from_env")).unwrap();
        assert_eq!(s.plan.seed, 9);
        assert_eq!(s.plan.mode, Mode::FedavgCl);
        assert_eq!(s.plan.beta, 0.05);
        assert_eq!(s.out_dir, PathBuf::from("from_env"));

        let flagged = Overrides {
            out_dir: Some(PathBuf::from("from_flag")),
            ..flags
        };
        let s2 = resolve(&file, &flagged, Some("from_env")).unwrap();
        assert_eq!(s2.out_dir, PathBuf::from("from_flag"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ConfigFile::parse("sede = 42").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("sede"));
    }

    #[test]
    fn bad_values_are_rejected() {
        let file = ConfigFile::parse("mode = \"warp\"").unwrap();
        assert!(resolve(&file, &Overrides::default(), None).is_err());

        let file = ConfigFile::parse("unique = [\"sine:a\", \"poly:b\", \"sine:c\"]").unwrap();
        let err = resolve(&file, &Overrides::default(), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let file = ConfigFile::parse("clients = 0").unwrap();
        assert!(resolve(&file, &Overrides::default(), None).is_err());
    }

    #[test]
    fn resolved_plan_round_trips_through_toml() {
        let text = r#"
seed = 11
mode = "local_only"
clients = 4
epochs = 2
rounds_per_task = 3
n_z = 4
hidden = 8
"#;
        let a = resolve(
            &ConfigFile::parse(text).unwrap(),
            &Overrides::default(),
            None,
        )
        .unwrap();
        let b = resolve(
            &ConfigFile::parse(text).unwrap(),
            &Overrides::default(),
            None,
        )
        .unwrap();
        assert_eq!(format!("{:?}", a.plan), format!("{:?}", b.plan));
    }
}
