//! End-to-end acceptance suite.
//!
//! Each test covers one acceptance criterion and prints a single
//! `criterion N (label): PASS/FAIL` line with the measured margin, so a
//! full run of this target doubles as a checklist. Criteria 4, 5, and 7
//! share one lazily-built cache of benchmark runs; everything else builds
//! its own small fixtures.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use feddah::amr::{
    js_divergence, server_update, similarity_weight, task_loss, trace_history_loss,
    trace_known_loss, trace_task_loss, weight_histograms, AmrConfig, ServerState,
};
use feddah::client::{init_model, ClientUpdate};
use feddah::federation::{build_streams, run_experiment, ExperimentPlan, ExperimentResult, Mode};
use feddah::hypernet::{generate_model, HyperParams, ModelSpec, ModelWeights, TaskRegistry};
use feddah::metrics::{summarize, Summary};
use feddah::numcore::{grad_check, ParamSet, Tensor};
use feddah::rng::substream;
use rand::Rng;

const SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

// ─── shared benchmark cache ─────────────────────────────────────────────

struct BenchCache {
    /// Summary per (mode name, seed) across all five ablation-grid modes.
    summaries: BTreeMap<(String, u64), Summary>,
    /// Full-mode raw results, needed for schedule and trajectory checks.
    full_runs: BTreeMap<u64, ExperimentResult<f64>>,
    /// Wall-clock seconds spent building the grid.
    elapsed: f64,
}

static BENCH: OnceLock<BenchCache> = OnceLock::new();

fn bench() -> &'static BenchCache {
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let mut summaries = BTreeMap::new();
        let mut full_runs = BTreeMap::new();
        let modes = [
            Mode::Full,
            Mode::NoLr,
            Mode::NoWs,
            Mode::NoDahyper,
            Mode::FedavgCl,
        ];
        for &seed in &SEEDS {
            for &mode in &modes {
                let plan = ExperimentPlan::benchmark(seed, mode);
                let result = run_experiment::<f64>(plan).expect("benchmark run succeeds");
                let summary =
                    summarize(&result.metrics, mode.name(), seed).expect("summary builds");
                summaries.insert((mode.name().to_string(), seed), summary);
                if mode == Mode::Full {
                    full_runs.insert(seed, result);
                }
            }
        }
        BenchCache {
            summaries,
            full_runs,
            elapsed: start.elapsed().as_secs_f64(),
        }
    })
}

// ─── criterion 1: analytic gradients match finite differences ───────────

fn small_random_deltas(params: &ParamSet<f64>, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = substream(seed, "acceptance-delta", &[]);
    params
        .iter()
        .map(|(_, t)| {
            let vals: Vec<f64> = (0..t.len()).map(|_| 0.01 * rng.random_range(-1.0..1.0)).collect();
            Tensor::from_vec(t.shape(), vals).expect("delta shape matches")
        })
        .collect()
}

#[test]
fn criterion_1_gradient_checks() {
    let start = Instant::now();
    let spec = ModelSpec::chain(&[2, 3, 2, 1]).unwrap();
    let hp: HyperParams<f64> = HyperParams::init(spec.clone(), 4, 5, 11).unwrap();
    let mut registry: TaskRegistry<f64> = TaskRegistry::new(11, 4, 0.0, 1.0).unwrap();
    registry.register("task-a").unwrap();
    registry.register("task-b").unwrap();
    let id_a = registry.get("task-a").unwrap().clone();
    let id_b = registry.get("task-b").unwrap().clone();

    let target_b = init_model::<f64>(&spec, &mut substream(11, "acceptance-target", &[1]));
    let upload_b = init_model(&spec, &mut substream(11, "acceptance-target", &[2]));
    let snapshot_a = generate_model(&hp, &id_a).unwrap();
    let delta_1 = small_random_deltas(hp.params(), 3);
    let delta_2 = small_random_deltas(hp.params(), 4);

    let h = 1e-5;
    let tol = 1e-5;

    let fit = grad_check(
        |tape, nodes| trace_task_loss(tape, &hp, nodes, &id_b, &target_b),
        hp.params(),
        h,
        tol,
    )
    .unwrap();

    let history = grad_check(
        |tape, nodes| {
            trace_history_loss(
                tape,
                &hp,
                nodes,
                &delta_1,
                std::slice::from_ref(&id_a),
                std::slice::from_ref(&snapshot_a),
            )
        },
        hp.params(),
        h,
        tol,
    )
    .unwrap();

    let composite = grad_check(
        |tape, nodes| {
            trace_known_loss(
                tape,
                &hp,
                nodes,
                &id_b,
                &target_b,
                &upload_b,
                0.7,
                0.3,
                0.2,
                Some(&delta_1),
                Some(&delta_2),
                std::slice::from_ref(&id_a),
                std::slice::from_ref(&snapshot_a),
            )
            .map(|t| t.total)
        },
        hp.params(),
        h,
        tol,
    )
    .unwrap();

    let worst = fit
        .max_rel_err
        .max(history.max_rel_err)
        .max(composite.max_rel_err);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = fit.passed() && history.passed() && composite.passed() && elapsed < 30.0;
    println!(
        "criterion 1 (gradient checks): {} — max rel err {:.3e} over {} params, {:.1}s",
        if pass { "PASS" } else { "FAIL" },
        worst,
        hp.param_count(),
        elapsed,
    );
    assert!(
        fit.passed(),
        "fit-loss gradients disagree with finite differences: {}",
        fit.describe()
    );
    assert!(
        history.passed(),
        "history-loss gradients disagree with finite differences: {}",
        history.describe()
    );
    assert!(
        composite.passed(),
        "composite-loss gradients disagree with finite differences: {}",
        composite.describe()
    );
    assert!(elapsed < 30.0, "gradient checks took {elapsed:.1}s (budget 30s)");
}

// ─── criterion 2: histogram similarity against an independent oracle ────

fn oracle_histograms(a: &[f64], b: &[f64], bins: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    let index = |v: f64| -> usize {
        if width > 0.0 {
            (((v - lo) / width * bins as f64) as usize).min(bins - 1)
        } else {
            0
        }
    };
    let hist = |vals: &[f64]| -> Vec<f64> {
        let mut counts = vec![0usize; bins];
        for &v in vals {
            counts[index(v)] += 1;
        }
        let denom = vals.len() as f64 + bins as f64 * eps;
        counts.iter().map(|&c| (c as f64 + eps) / denom).collect()
    };
    (hist(a), hist(b))
}

fn oracle_js(p: &[f64], q: &[f64]) -> f64 {
    let mut kl_pm = 0.0;
    let mut kl_qm = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = 0.5 * (pi + qi);
        if pi > 0.0 {
            kl_pm += pi * (pi / m).ln();
        }
        if qi > 0.0 {
            kl_qm += qi * (qi / m).ln();
        }
    }
    0.5 * (kl_pm + kl_qm)
}

#[test]
fn criterion_2_similarity_oracle() {
    let spec = ModelSpec::chain(&[2, 5, 3]).unwrap();
    let bins = 64;
    let eps = 1e-8;
    let mut max_dev: f64 = 0.0;
    for k in 0..100u64 {
        let a = init_model::<f64>(&spec, &mut substream(29, "acceptance-hist", &[k, 0]));
        let b = init_model::<f64>(&spec, &mut substream(29, "acceptance-hist", &[k, 1]));
        let (p, q) = weight_histograms(&a, &b, bins, eps).unwrap();
        let (po, qo) = oracle_histograms(a.flatten().data(), b.flatten().data(), bins, eps);
        for i in 0..bins {
            max_dev = max_dev.max((p[i] - po[i]).abs()).max((q[i] - qo[i]).abs());
        }
        let js = js_divergence(&p, &q).unwrap();
        max_dev = max_dev.max((js - oracle_js(&po, &qo)).abs());
    }

    // Two weight sets whose pooled two-bin histograms are exactly
    // [0.5, 0.5] and [0.9, 0.1], up to smoothing.
    let half = ModelWeights::from_layers(vec![(
        Tensor::matrix(1, 1, vec![0.25]).unwrap(),
        Tensor::vector(vec![0.75]),
    )]);
    let skewed = ModelWeights::from_layers(vec![(
        Tensor::matrix(1, 9, vec![0.1; 9]).unwrap(),
        Tensor::vector(vec![0.9]),
    )]);
    let (p2, q2) = weight_histograms(&half, &skewed, 2, eps).unwrap();
    let js2 = js_divergence(&p2, &q2).unwrap();
    // Closed form for P=[.5,.5], Q=[.9,.1]: mixture M=[.7,.3], then
    // JS = (KL(P||M) + KL(Q||M)) / 2, evaluated directly.
    let closed = {
        let kl_pm = 0.5 * (0.5f64 / 0.7).ln() + 0.5 * (0.5f64 / 0.3).ln();
        let kl_qm = 0.9 * (0.9f64 / 0.7).ln() + 0.1 * (0.1f64 / 0.3).ln();
        0.5 * (kl_pm + kl_qm)
    };
    let closed_dev = (js2 - closed).abs();
    let w2 = similarity_weight(&half, &skewed, 2, eps).unwrap();
    let w_expected = (1.0 - closed / 2.0f64.ln()).clamp(0.0, 1.0);

    let spec_self = init_model::<f64>(&spec, &mut substream(29, "acceptance-hist", &[999, 0]));
    let self_w = similarity_weight(&spec_self, &spec_self, bins, eps).unwrap();

    let pass = max_dev <= 1e-10 && closed_dev <= 1e-3 && (w2 - w_expected).abs() <= 1e-3 && self_w == 1.0;
    println!(
        "criterion 2 (similarity oracle): {} — max oracle dev {:.2e}, closed-form dev {:.2e}, self similarity {}",
        if pass { "PASS" } else { "FAIL" },
        max_dev,
        closed_dev,
        self_w,
    );
    assert!(max_dev <= 1e-10, "histogram/divergence deviates from oracle by {max_dev:.3e}");
    assert!(
        closed_dev <= 1e-3,
        "two-bin divergence {js2} differs from closed form {closed}"
    );
    assert!(
        (w2 - w_expected).abs() <= 1e-3,
        "similarity weight {w2} differs from closed form {w_expected}"
    );
    assert!(self_w == 1.0, "self similarity must be exactly 1, got {self_w}");
}

// ─── criterion 3: meta-level memory of earlier fits ─────────────────────

/// Sequentially fits five random targets through the server update and
/// returns (error right after own fit, error after the fifth fit) per
/// target, both as L2 distances.
fn meta_fit(seed: u64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let spec = ModelSpec::chain(&[2, 6, 1]).unwrap();
    let hp: HyperParams<f64> = HyperParams::init(spec.clone(), 8, 8, seed).unwrap();
    let registry: TaskRegistry<f64> = TaskRegistry::new(seed, 8, 0.0, 1.0).unwrap();
    let cfg = AmrConfig {
        lr: 3e-3,
        beta,
        n_server: 500,
        ..AmrConfig::default()
    };
    let mut state = ServerState::new(hp, registry, cfg).unwrap();
    let targets: Vec<ModelWeights<f64>> = (0..5)
        .map(|t| init_model(&spec, &mut substream(seed, "meta-target", &[t])))
        .collect();
    let task_id = |t: usize| format!("target-{t}");

    let mut post_fit = Vec::with_capacity(targets.len());
    for (t, target) in targets.iter().enumerate() {
        state.registry_mut().register(&task_id(t)).unwrap();
        let upload = ClientUpdate {
            client_id: "c0".to_string(),
            task_id: task_id(t),
            weights: target.clone(),
            train_loss: 0.0,
        };
        server_update(&mut state, &[upload], t as u64).unwrap();
        let gen = state.generate_for(&task_id(t)).unwrap();
        post_fit.push(task_loss(&gen, target).unwrap().sqrt());
    }
    let final_err = targets
        .iter()
        .enumerate()
        .map(|(t, target)| {
            let gen = state.generate_for(&task_id(t)).unwrap();
            task_loss(&gen, target).unwrap().sqrt()
        })
        .collect();
    (post_fit, final_err)
}

#[test]
fn criterion_3_meta_memorization() {
    let start = Instant::now();
    let mut good = 0usize;
    let mut details = Vec::new();
    for &seed in &SEEDS {
        let (post_reg, final_reg) = meta_fit(seed, 0.5);
        let (post_plain, final_plain) = meta_fit(seed, 0.0);
        // Ratios for the four targets fitted before the fifth.
        let held = (0..4).all(|t| final_reg[t] < 1.5 * post_reg[t]);
        let degraded = (0..4).any(|t| final_plain[t] > 5.0 * post_plain[t]);
        if held && degraded {
            good += 1;
        }
        let worst_reg = (0..4)
            .map(|t| final_reg[t] / post_reg[t])
            .fold(0.0f64, f64::max);
        let worst_plain = (0..4)
            .map(|t| final_plain[t] / post_plain[t])
            .fold(0.0f64, f64::max);
        details.push(format!(
            "seed {seed}: reg x{worst_reg:.2}{} plain x{worst_plain:.1}{}",
            if held { "" } else { " (broke)" },
            if degraded { "" } else { " (kept)" },
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = good >= 4 && elapsed < 300.0;
    println!(
        "criterion 3 (meta memorization): {} — {good}/5 seeds ({}), {:.0}s",
        if pass { "PASS" } else { "FAIL" },
        details.join("; "),
        elapsed,
    );
    assert!(good >= 4, "memory held on only {good}/5 seeds: {}", details.join("; "));
    assert!(elapsed < 300.0, "meta-memorization took {elapsed:.0}s (budget 300s)");
}

// ─── criterion 4: full mode wins the ablation grid ──────────────────────

#[test]
fn criterion_4_ablation_ordering() {
    let cache = bench();
    let comparators = ["no_lr", "no_ws", "no_dahyper", "fedavg_cl"];
    let mut wins = 0usize;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let full = &cache.summaries[&("full".to_string(), seed)];
        let beaten = comparators.iter().all(|&m| {
            let other = &cache.summaries[&(m.to_string(), seed)];
            full.final_average_loss < other.final_average_loss
                && full.mean_forgetting < other.mean_forgetting
        });
        if beaten {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: full {:.3}/{:.3} {}",
            full.final_average_loss,
            full.mean_forgetting,
            if beaten { "wins" } else { "loses" },
        ));
    }
    let pass = wins >= 4 && cache.elapsed < 1800.0;
    println!(
        "criterion 4 (ablation ordering): {} — full sweeps both metrics on {wins}/5 seeds ({}), grid {:.0}s",
        if pass { "PASS" } else { "FAIL" },
        lines.join("; "),
        cache.elapsed,
    );
    assert!(
        wins >= 4,
        "full mode won on only {wins}/5 seeds: {}",
        lines.join("; ")
    );
    assert!(
        cache.elapsed < 1800.0,
        "ablation grid took {:.0}s (budget 1800s)",
        cache.elapsed
    );
}

// ─── criterion 5: a recurring task improves across clients ──────────────

/// For one seed's full run, finds the shared task whose first two distinct
/// engagement blocks are farthest apart and returns the offered-model test
/// loss at the end of each block.
fn recurring_task_losses(seed: u64, result: &ExperimentResult<f64>) -> (String, f64, f64) {
    let plan = ExperimentPlan::benchmark(seed, Mode::Full);
    let streams = build_streams(&plan).unwrap();
    let t = plan.rounds_per_task;
    let mut best: Option<(usize, String, usize, usize)> = None;
    for label in &plan.shared {
        let id = label.id();
        let mut starts: Vec<usize> = streams
            .iter()
            .filter_map(|s| s.iter().position(|x| *x == id).map(|p| p * t))
            .collect();
        starts.sort_unstable();
        starts.dedup();
        if starts.len() < 2 {
            continue;
        }
        let gap = starts[1] - starts[0];
        let candidate = (gap, id.clone(), starts[0], starts[1]);
        let better = match &best {
            None => true,
            Some((g, i, _, _)) => gap > *g || (gap == *g && id < *i),
        };
        if better {
            best = Some(candidate);
        }
    }
    let (_, id, start_a, start_b) = best.expect("benchmark has a shared task on two blocks");
    let loss_at = |round: u64| -> f64 {
        result
            .metrics
            .iter()
            .find(|r| r.round == round && r.task_id == id && r.client_id == "c0")
            .expect("evaluation row exists for every round and task")
            .test_loss
    };
    let after_first = loss_at((start_a + t - 1) as u64);
    let after_second = loss_at((start_b + t - 1) as u64);
    (id, after_first, after_second)
}

#[test]
fn criterion_5_shared_task_improvement() {
    let cache = bench();
    let mut good = 0usize;
    let mut lines = Vec::new();
    for &seed in &SEEDS {
        let (task, after_first, after_second) = recurring_task_losses(seed, &cache.full_runs[&seed]);
        let improved = after_second <= after_first;
        if improved {
            good += 1;
        }
        lines.push(format!(
            "seed {seed} {task}: {after_first:.3} -> {after_second:.3}{}",
            if improved { "" } else { " (worse)" },
        ));
    }
    let pass = good >= 4;
    println!(
        "criterion 5 (shared-task improvement): {} — second engagement at or below first on {good}/5 seeds ({})",
        if pass { "PASS" } else { "FAIL" },
        lines.join("; "),
    );
    assert!(
        good >= 4,
        "second engagement improved on only {good}/5 seeds: {}",
        lines.join("; ")
    );
}

// ─── criterion 6: byte-identical artifacts on repeated runs ─────────────

#[test]
fn criterion_6_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        r#"
seed = 7
clients = 2
epochs = 1
rounds_per_task = 2
n_z = 4
hidden = 5
n_server = 4
model_dims = [2, 4, 1]
shared_initial = ["sine:w0"]
shared = ["poly:s0"]
unique = ["sine:u0", "poly:u1"]
train_samples = 4
test_samples = 3
"#,
    )
    .unwrap();
    let run = |out: &std::path::Path| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_feddah"))
            .args(["run", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .env_remove("FEDDAH_OUT")
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "benchmark run failed");
    };
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    run(&out1);
    run(&out2);

    let mut identical = true;
    let mut checked = Vec::new();
    for name in [
        feddah::artifacts::METRICS_FILE,
        feddah::artifacts::RECORDS_FILE,
        feddah::artifacts::CHECKPOINT_FILE,
    ] {
        let p1 = out1.join("full").join("7").join(name);
        let p2 = out2.join("full").join("7").join(name);
        let b1 = std::fs::read(&p1).unwrap_or_else(|_| panic!("missing {}", p1.display()));
        let b2 = std::fs::read(&p2).unwrap_or_else(|_| panic!("missing {}", p2.display()));
        identical &= b1 == b2;
        checked.push(format!("{name} {}B", b1.len()));
    }
    println!(
        "criterion 6 (determinism): {} — {}",
        if identical { "PASS" } else { "FAIL" },
        checked.join(", "),
    );
    assert!(identical, "artifacts differ between identical runs");
}

// ─── criterion 7: upload schedule and recorded loss recomposition ───────

#[test]
fn criterion_7_schedule_and_recomposition() {
    let cache = bench();
    let mut max_dev: f64 = 0.0;
    let mut schedule_ok = true;
    for &seed in &SEEDS {
        let plan = ExperimentPlan::benchmark(seed, Mode::Full);
        let result = &cache.full_runs[&seed];
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        for rec in &result.records {
            for client in &rec.client_ids {
                *counts
                    .entry((client.clone(), rec.task_id.clone()))
                    .or_default() += 1;
            }
        }
        let streams = build_streams(&plan).unwrap();
        let mut expected: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (c, stream) in streams.iter().enumerate() {
            for task in stream {
                expected.insert((format!("c{c}"), task.clone()), plan.rounds_per_task);
            }
        }
        if counts != expected {
            schedule_ok = false;
        }
        for rec in &result.records {
            let recomposed = match (rec.w_s, rec.l_task_hist, rec.l_r1) {
                (Some(w), Some(hist), r1) => {
                    w * (hist + plan.beta1 * r1.unwrap_or(0.0))
                        + (1.0 - w) * (rec.l_task_upload + plan.beta2 * rec.l_r2)
                }
                _ => rec.l_task_upload + plan.beta * rec.l_r2,
            };
            max_dev = max_dev.max((recomposed - rec.total_loss).abs());
        }
    }
    let pass = schedule_ok && max_dev <= 1e-10;
    println!(
        "criterion 7 (schedule and recomposition): {} — every (client, task) uploads {}x, max total dev {:.2e}",
        if pass { "PASS" } else { "FAIL" },
        ExperimentPlan::benchmark(42, Mode::Full).rounds_per_task,
        max_dev,
    );
    assert!(schedule_ok, "upload counts diverge from the planned schedule");
    assert!(
        max_dev <= 1e-10,
        "recorded totals do not recompose from their parts (max dev {max_dev:.3e})"
    );
}
