//! Adaptive model recalibration: the server-side update rule.
//!
//! The server holds one hypernetwork plus, per task, a stored "basic model"
//! (the last generated weights for that task). When a client uploads weights
//! for a task the server recalibrates the hypernetwork toward them:
//!
//! * **unseen task** — minimize the squared distance between the generated
//!   model and the upload, plus `beta ·` a history regularizer that keeps
//!   the generated weights of previously learned tasks near their values at
//!   the start of the round;
//! * **known task** — balance two optimization targets, the stored basic
//!   model and the fresh upload. The blend weight `w_s ∈ [0, 1]` comes from
//!   the similarity of the two models' weight histograms; each branch gets
//!   its own history regularizer (`beta1`, `beta2`). The combined loss is
//!   `w_s · (L_hist + beta1 · R_hist) + (1 − w_s) · (L_up + beta2 · R_up)`.
//!
//! The history regularizer for a branch is evaluated at a lookahead: a
//! "candidate change" is the parameter step the optimizer would take toward
//! that branch's target, and the regularizer penalizes how far that step
//! would move previously learned generated models, averaged over those
//! tasks. The snapshot side of the comparison is frozen at the state the
//! hypernetwork had when the round began, so gradients flow only through
//! the lookahead side.

use crate::client::ClientUpdate;
use crate::error::{Error, Result};
use crate::hypernet::{
    generate_model, trace_generate, GeneratedNodes, HyperParams, ModelWeights, TaskIdentity,
    TaskRegistry,
};
use crate::numcore::{Adam, AdamConfig, Gradients, NodeId, Scalar, Sgd, Tape, Tensor};
use serde::Serialize;
use std::collections::BTreeMap;

// ─── configuration ──────────────────────────────────────────────────────

/// Which optimizer drives the server update and candidate lookaheads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ServerOptimizer {
    /// Adam with standard decay rates; candidate lookaheads use a fresh,
    /// throwaway moment state so they never disturb the persistent one.
    Adam,
    /// Plain gradient descent.
    Sgd,
}

/// Which model is compared against the stored basic model when computing
/// the similarity weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilaritySource {
    /// Compare the freshly generated model to the stored one.
    Generated,
    /// Compare the raw upload to the stored one.
    Upload,
}

/// Server-update hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AmrConfig<F> {
    /// Server learning rate.
    pub lr: F,
    /// History-regularizer coefficient for single-target updates.
    pub beta: F,
    /// History-regularizer coefficient on the stored-model branch.
    pub beta1: F,
    /// History-regularizer coefficient on the upload branch.
    pub beta2: F,
    /// Optimizer steps per candidate lookahead.
    pub n_inner: usize,
    /// Optimizer steps per upload processed.
    pub n_server: usize,
    /// Histogram bins for the similarity weight.
    pub bins: usize,
    /// Histogram smoothing mass.
    pub smoothing: F,
    pub optimizer: ServerOptimizer,
    pub similarity_source: SimilaritySource,
    /// When false the similarity weight is pinned to zero, so only the
    /// fresh upload is pursued (ablation).
    pub use_similarity: bool,
}

impl<F: Scalar> Default for AmrConfig<F> {
    fn default() -> Self {
        AmrConfig {
            lr: F::of(1e-3),
            beta: F::of(0.01),
            beta1: F::of(0.01),
            beta2: F::of(0.01),
            n_inner: 1,
            n_server: 20,
            bins: 64,
            smoothing: F::of(1e-8),
            optimizer: ServerOptimizer::Adam,
            similarity_source: SimilaritySource::Generated,
            use_similarity: true,
        }
    }
}

impl<F: Scalar> AmrConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("histogram bins must be positive".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("beta", self.beta),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("smoothing", self.smoothing),
        ] {
            if !v.is_finite() || v < F::zero() {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        if self.smoothing <= F::zero() {
            return Err(Error::Config("smoothing must be positive".into()));
        }
        Ok(())
    }
}

// ─── server state ───────────────────────────────────────────────────────

/// Stored per-task model: the last generated weights plus bookkeeping.
#[derive(Clone, Debug)]
pub struct BasicModel<F> {
    pub weights: ModelWeights<F>,
    pub round_updated: u64,
}

/// Hypernetwork, identity registry, stored basic models, and optimizer
/// moments: everything the server carries between rounds.
#[derive(Clone, Debug)]
pub struct ServerState<F> {
    hp: HyperParams<F>,
    registry: TaskRegistry<F>,
    basics: BTreeMap<String, BasicModel<F>>,
    optimizer: Adam<F>,
    cfg: AmrConfig<F>,
}

impl<F: Scalar> ServerState<F> {
    pub fn new(hp: HyperParams<F>, registry: TaskRegistry<F>, cfg: AmrConfig<F>) -> Result<Self> {
        cfg.validate()?;
        if registry.n_z() != hp.n_z() {
            return Err(Error::Config(format!(
                "registry n_z {} vs hypernet n_z {}",
                registry.n_z(),
                hp.n_z()
            )));
        }
        let optimizer = Adam::new(AdamConfig::with_lr(cfg.lr), hp.params());
        Ok(ServerState {
            hp,
            registry,
            basics: BTreeMap::new(),
            optimizer,
            cfg,
        })
    }

    pub fn hp(&self) -> &HyperParams<F> {
        &self.hp
    }

    pub fn registry(&self) -> &TaskRegistry<F> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut TaskRegistry<F> {
        &mut self.registry
    }

    pub fn cfg(&self) -> &AmrConfig<F> {
        &self.cfg
    }

    pub fn basic(&self, task_id: &str) -> Option<&BasicModel<F>> {
        self.basics.get(task_id)
    }

    /// Task ids that currently have a stored basic model, in id order.
    pub fn basic_tasks(&self) -> impl Iterator<Item = &str> {
        self.basics.keys().map(String::as_str)
    }

    pub fn basic_count(&self) -> usize {
        self.basics.len()
    }

    /// Generates the current model for a registered task.
    pub fn generate_for(&self, task_id: &str) -> Result<ModelWeights<F>> {
        let identity = self
            .registry
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        generate_model(&self.hp, identity)
    }
}

// ─── core losses ────────────────────────────────────────────────────────

/// Squared L2 distance between two same-shape weight sets, summed over
/// every parameter.
pub fn task_loss<F: Scalar>(generated: &ModelWeights<F>, target: &ModelWeights<F>) -> Result<F> {
    generated.sq_dist(target)
}

/// The parameter step the configured optimizer would take toward `target`,
/// starting from `hp`, without mutating anything.
///
/// Runs `n_inner` steps minimizing [`task_loss`] between the generated
/// model for `identity` and `target`; returns per-slot deltas (end minus
/// start). Zero inner steps, or a target the hypernetwork already
/// reproduces exactly, give exact zeros.
pub fn candidate_change<F: Scalar>(
    hp: &HyperParams<F>,
    identity: &TaskIdentity<F>,
    target: &ModelWeights<F>,
    cfg: &AmrConfig<F>,
) -> Result<Vec<Tensor<F>>> {
    let mut scratch = hp.clone();
    let target_flats = layer_flats(target);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), scratch.params());
    let sgd = Sgd { lr: cfg.lr };
    for _ in 0..cfg.n_inner {
        let mut tape = Tape::new();
        let nodes = tape.params(scratch.params())?;
        let gen = trace_generate(&mut tape, &scratch, &nodes, &identity.z)?;
        let loss = sum_layer_sq_diffs(&mut tape, &gen, &target_flats)?;
        let grads = tape.backward(loss)?;
        match cfg.optimizer {
            ServerOptimizer::Adam => adam.step(scratch.params_mut(), &grads)?,
            ServerOptimizer::Sgd => sgd.step(scratch.params_mut(), &grads)?,
        }
    }
    let delta = (0..hp.params().len())
        .map(|slot| {
            scratch
                .params()
                .tensor(slot)
                .sub(hp.params().tensor(slot))
                .expect("same layout")
        })
        .collect();
    Ok(delta)
}

/// History regularizer: mean squared distance, over previously learned
/// tasks, between the snapshot's generated weights and the weights the
/// lookahead parameters (`hp + delta`) would generate.
///
/// Empty task lists give exactly zero; so does a zero delta when `hp`
/// equals the snapshot.
pub fn history_regularizer<F: Scalar>(
    hp: &HyperParams<F>,
    snapshot: &HyperParams<F>,
    delta: &[Tensor<F>],
    previous: &[TaskIdentity<F>],
) -> Result<F> {
    if previous.is_empty() {
        return Ok(F::zero());
    }
    let mut shifted = hp.clone();
    shifted.params_mut().add_scaled(delta, F::one())?;
    let mut acc = F::zero();
    for identity in previous {
        let frozen = generate_model(snapshot, identity)?;
        let moved = generate_model(&shifted, identity)?;
        acc += frozen.sq_dist(&moved)?;
    }
    Ok(acc / F::of(previous.len() as f64))
}

// ─── similarity weighting ───────────────────────────────────────────────

/// Smoothed histograms of two weight sets over a shared binning.
///
/// Bin edges span the pooled value range of both models; each histogram is
/// normalized as `(count + smoothing) / (n + bins · smoothing)`, so every
/// bin carries positive mass. Identical models produce identical vectors.
pub fn weight_histograms<F: Scalar>(
    a: &ModelWeights<F>,
    b: &ModelWeights<F>,
    bins: usize,
    smoothing: F,
) -> Result<(Vec<F>, Vec<F>)> {
    if bins == 0 {
        return Err(Error::Config("histogram bins must be positive".into()));
    }
    if smoothing <= F::zero() {
        return Err(Error::Config("smoothing must be positive".into()));
    }
    let av = a.flatten();
    let bv = b.flatten();
    let mut lo = F::infinity();
    let mut hi = F::neg_infinity();
    for &v in av.data().iter().chain(bv.data()) {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "weight histogram input".to_string(),
            });
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let width = hi - lo;
    let count = |values: &[F]| -> Vec<usize> {
        let mut counts = vec![0usize; bins];
        for &v in values {
            let ix = if width > F::zero() {
                let rel = ((v - lo) / width) * F::of(bins as f64);
                (rel.to_f64().expect("finite bin index") as usize).min(bins - 1)
            } else {
                0
            };
            counts[ix] += 1;
        }
        counts
    };
    let normalize = |counts: Vec<usize>, n: usize| -> Vec<F> {
        let denom = F::of(n as f64) + F::of(bins as f64) * smoothing;
        counts
            .into_iter()
            .map(|c| (F::of(c as f64) + smoothing) / denom)
            .collect()
    };
    let pa = normalize(count(av.data()), av.len());
    let pb = normalize(count(bv.data()), bv.len());
    Ok((pa, pb))
}

/// Jensen-Shannon divergence in nats between two probability vectors.
pub fn js_divergence<F: Scalar>(p: &[F], q: &[F]) -> Result<F> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "js_divergence",
            format!("{} vs {} bins", p.len(), q.len()),
        ));
    }
    let half = F::of(0.5);
    let mut kl_pm = F::zero();
    let mut kl_qm = F::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        let m = half * (pi + qi);
        if pi > F::zero() {
            kl_pm += pi * (pi / m).ln();
        }
        if qi > F::zero() {
            kl_qm += qi * (qi / m).ln();
        }
    }
    Ok(half * (kl_pm + kl_qm))
}

/// Similarity weight between two weight sets: `1 − JS/ln 2`, clamped to
/// `[0, 1]`. Identical weights give exactly 1.
pub fn similarity_weight<F: Scalar>(
    a: &ModelWeights<F>,
    b: &ModelWeights<F>,
    bins: usize,
    smoothing: F,
) -> Result<F> {
    let (p, q) = weight_histograms(a, b, bins, smoothing)?;
    let js = js_divergence(&p, &q)?;
    let w = F::one() - js / F::of(2.0).ln();
    Ok(w.max(F::zero()).min(F::one()))
}

// ─── round records ──────────────────────────────────────────────────────

/// One server update, i.e. one `(round, task)` group, as recorded in
/// `rounds.jsonl`.
///
/// Loss fields hold the values computed at the last optimization step of
/// the group's final upload. For unseen tasks (no stored model yet) the
/// `w_s`, `l_task_hist`, and `l_r1` fields are null, and the total is
/// `l_task_upload + beta · l_r2`; otherwise the total recomposes as
/// `w_s · (l_task_hist + beta1 · l_r1) + (1 − w_s) · (l_task_upload +
/// beta2 · l_r2)`. `delta_norm` is the L2 norm of the full parameter
/// movement the group applied.
#[derive(Clone, Debug, Serialize)]
pub struct TaskRecord {
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

// ─── the server update ──────────────────────────────────────────────────

struct SnapshotCache<F> {
    snapshot: HyperParams<F>,
    models: BTreeMap<String, ModelWeights<F>>,
}

impl<F: Scalar> SnapshotCache<F> {
    fn new(snapshot: HyperParams<F>) -> Self {
        SnapshotCache {
            snapshot,
            models: BTreeMap::new(),
        }
    }

    fn model_for(&mut self, registry: &TaskRegistry<F>, task_id: &str) -> Result<&ModelWeights<F>> {
        if !self.models.contains_key(task_id) {
            let identity = registry
                .get(task_id)
                .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
            let gen = generate_model(&self.snapshot, identity)?;
            self.models.insert(task_id.to_string(), gen);
        }
        Ok(&self.models[task_id])
    }
}

/// Applies one round's worth of uploads to the server state.
///
/// Uploads are grouped by task in order of first appearance; a group's
/// uploads are processed sequentially in ascending client-id order. Every
/// upload's task must already be registered. Returns one record per
/// `(round, task)` group. On error the state may be partially advanced;
/// callers that need atomicity clone first.
pub fn server_update<F: Scalar>(
    state: &mut ServerState<F>,
    uploads: &[ClientUpdate<F>],
    round: u64,
) -> Result<Vec<TaskRecord>> {
    let mut groups: Vec<(String, Vec<&ClientUpdate<F>>)> = Vec::new();
    for up in uploads {
        if !state.registry.contains(&up.task_id) {
            return Err(Error::UnknownTask(up.task_id.clone()));
        }
        if !up.weights.matches(state.hp.spec()) {
            return Err(Error::shape(
                "server_update",
                format!("upload for `{}` does not match the model spec", up.task_id),
            ));
        }
        up.weights
            .validate_finite(&format!("upload from {}", up.client_id))?;
        match groups.iter_mut().find(|(t, _)| *t == up.task_id) {
            Some((_, list)) => list.push(up),
            None => groups.push((up.task_id.clone(), vec![up])),
        }
    }
    for (_, list) in &mut groups {
        list.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    }

    let mut cache = SnapshotCache::new(state.hp.clone());
    let mut records = Vec::with_capacity(groups.len());

    for (task_id, list) in groups {
        let before_group = state.hp.params().clone();
        let mut last = None;
        for up in &list {
            let outcome = apply_one_upload(state, &mut cache, &task_id, &up.weights, round)?;
            last = Some(outcome);
        }
        let outcome = last.expect("group has at least one upload");
        let after_group = state.hp.params();
        let delta_norm = before_group
            .sq_dist(after_group)?
            .to_f64()
            .expect("finite norm")
            .sqrt();
        records.push(TaskRecord {
            round,
            task_id,
            client_ids: list.iter().map(|u| u.client_id.clone()).collect(),
            w_s: outcome.w_s,
            l_task_hist: outcome.l_task_hist,
            l_task_upload: outcome.l_task_upload,
            l_r1: outcome.l_r1,
            l_r2: outcome.l_r2,
            total_loss: outcome.total,
            delta_norm,
        });
    }
    Ok(records)
}

struct UploadOutcome {
    w_s: Option<f64>,
    l_task_hist: Option<f64>,
    l_task_upload: f64,
    l_r1: Option<f64>,
    l_r2: f64,
    total: f64,
}

/// Processes a single upload: optimizes the hypernetwork for `n_server`
/// steps against the applicable targets, then refreshes the task's basic
/// model from the post-update hypernetwork.
fn apply_one_upload<F: Scalar>(
    state: &mut ServerState<F>,
    cache: &mut SnapshotCache<F>,
    task_id: &str,
    upload: &ModelWeights<F>,
    round: u64,
) -> Result<UploadOutcome> {
    let identity = state.registry.get(task_id).expect("caller checked").clone();
    let prev_ids: Vec<String> = state
        .basics
        .keys()
        .filter(|t| t.as_str() != task_id)
        .cloned()
        .collect();
    let previous: Vec<TaskIdentity<F>> = prev_ids
        .iter()
        .map(|t| state.registry.get(t).expect("basic model task is registered").clone())
        .collect();
    let mut prev_targets: Vec<ModelWeights<F>> = Vec::with_capacity(prev_ids.len());
    for t in &prev_ids {
        prev_targets.push(cache.model_for(&state.registry, t)?.clone());
    }

    let cfg = state.cfg;
    let zero = F::zero();

    let outcome = match state.basics.get(task_id).map(|b| b.weights.clone()) {
        None => {
            // Unseen task: single optimization target, the upload itself.
            let mut last = (zero, zero, zero);
            for _ in 0..cfg.n_server {
                let delta = if reg_active(cfg.beta, &previous) {
                    Some(candidate_change(&state.hp, &identity, upload, &cfg)?)
                } else {
                    None
                };
                let mut tape = Tape::new();
                let nodes = tape.params(state.hp.params())?;
                let trace = trace_unseen_loss(
                    &mut tape,
                    &state.hp,
                    &nodes,
                    &identity,
                    upload,
                    cfg.beta,
                    delta.as_deref(),
                    &previous,
                    &prev_targets,
                )?;
                last = (
                    tape.scalar_value(trace.l_task),
                    trace.l_r.map(|n| tape.scalar_value(n)).unwrap_or(zero),
                    tape.scalar_value(trace.total),
                );
                let grads = tape.backward(trace.total)?;
                step_server(state, &grads)?;
            }
            UploadOutcome {
                w_s: None,
                l_task_hist: None,
                l_task_upload: as_f64(last.0),
                l_r1: None,
                l_r2: as_f64(last.1),
                total: as_f64(last.2),
            }
        }
        Some(basic) => {
            // Known task: blend the stored model and the upload.
            let w_s = if cfg.use_similarity {
                let source = match cfg.similarity_source {
                    SimilaritySource::Generated => generate_model(&state.hp, &identity)?,
                    SimilaritySource::Upload => upload.clone(),
                };
                similarity_weight(&source, &basic, cfg.bins, cfg.smoothing)?
            } else {
                zero
            };
            let mut last = (zero, zero, zero, zero, zero);
            for _ in 0..cfg.n_server {
                let delta_hist = if reg_active(cfg.beta1, &previous) {
                    Some(candidate_change(&state.hp, &identity, &basic, &cfg)?)
                } else {
                    None
                };
                let delta_up = if reg_active(cfg.beta2, &previous) {
                    Some(candidate_change(&state.hp, &identity, upload, &cfg)?)
                } else {
                    None
                };
                let mut tape = Tape::new();
                let nodes = tape.params(state.hp.params())?;
                let trace = trace_known_loss(
                    &mut tape,
                    &state.hp,
                    &nodes,
                    &identity,
                    &basic,
                    upload,
                    w_s,
                    cfg.beta1,
                    cfg.beta2,
                    delta_hist.as_deref(),
                    delta_up.as_deref(),
                    &previous,
                    &prev_targets,
                )?;
                last = (
                    tape.scalar_value(trace.l_hist),
                    tape.scalar_value(trace.l_up),
                    trace.l_r1.map(|n| tape.scalar_value(n)).unwrap_or(zero),
                    trace.l_r2.map(|n| tape.scalar_value(n)).unwrap_or(zero),
                    tape.scalar_value(trace.total),
                );
                let grads = tape.backward(trace.total)?;
                step_server(state, &grads)?;
            }
            UploadOutcome {
                w_s: Some(as_f64(w_s)),
                l_task_hist: Some(as_f64(last.0)),
                l_task_upload: as_f64(last.1),
                l_r1: Some(as_f64(last.2)),
                l_r2: as_f64(last.3),
                total: as_f64(last.4),
            }
        }
    };

    let refreshed = generate_model(&state.hp, &identity)?;
    state.basics.insert(
        task_id.to_string(),
        BasicModel {
            weights: refreshed,
            round_updated: round,
        },
    );
    Ok(outcome)
}

fn reg_active<F: Scalar, T>(beta: F, previous: &[T]) -> bool {
    beta > F::zero() && !previous.is_empty()
}

fn step_server<F: Scalar>(state: &mut ServerState<F>, grads: &Gradients<F>) -> Result<()> {
    let ServerState {
        hp, optimizer, cfg, ..
    } = state;
    match cfg.optimizer {
        ServerOptimizer::Adam => optimizer.step(hp.params_mut(), grads),
        ServerOptimizer::Sgd => Sgd { lr: cfg.lr }.step(hp.params_mut(), grads),
    }
}

// ─── traced loss pieces ─────────────────────────────────────────────────

/// Per-layer flat views of a weight set, in generator order.
pub fn layer_flats<F: Scalar>(weights: &ModelWeights<F>) -> Vec<Tensor<F>> {
    (0..weights.layer_count())
        .map(|j| weights.layer_flat_cols(j))
        .collect()
}

/// Sum over layers of squared distances between generated nodes and fixed
/// targets.
fn sum_layer_sq_diffs<F: Scalar>(
    tape: &mut Tape<F>,
    gen: &GeneratedNodes,
    targets: &[Tensor<F>],
) -> Result<NodeId> {
    let mut acc = None;
    for (j, &flat) in gen.layer_flat.iter().enumerate() {
        let t = tape.constant(targets[j].clone());
        let term = tape.sq_diff_sum(flat, t)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    acc.ok_or_else(|| Error::Config("model spec has no layers".into()))
}

/// Traces the task loss: squared distance between the generated model for
/// `identity` and a fixed `target`.
pub fn trace_task_loss<F: Scalar>(
    tape: &mut Tape<F>,
    hp: &HyperParams<F>,
    nodes: &[NodeId],
    identity: &TaskIdentity<F>,
    target: &ModelWeights<F>,
) -> Result<NodeId> {
    let gen = trace_generate(tape, hp, nodes, &identity.z)?;
    sum_layer_sq_diffs(tape, &gen, &layer_flats(target))
}

/// Traces the history regularizer at the lookahead `params + delta`:
/// mean over previous tasks of the squared distance between that task's
/// frozen round-entry generation (`prev_targets`) and the lookahead
/// generation. Gradients flow to the parameter leaves through the
/// lookahead side only.
pub fn trace_history_loss<F: Scalar>(
    tape: &mut Tape<F>,
    hp: &HyperParams<F>,
    nodes: &[NodeId],
    delta: &[Tensor<F>],
    previous: &[TaskIdentity<F>],
    prev_targets: &[ModelWeights<F>],
) -> Result<NodeId> {
    if previous.len() != prev_targets.len() {
        return Err(Error::shape(
            "trace_history_loss",
            format!(
                "{} identities vs {} targets",
                previous.len(),
                prev_targets.len()
            ),
        ));
    }
    let shifted: Vec<NodeId> = nodes
        .iter()
        .zip(delta)
        .map(|(&n, d)| {
            let c = tape.constant(d.clone());
            tape.add(n, c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut acc = None;
    for (identity, target) in previous.iter().zip(prev_targets) {
        let gen = trace_generate(tape, hp, &shifted, &identity.z)?;
        let term = sum_layer_sq_diffs(tape, &gen, &layer_flats(target))?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::Config("history term needs previous tasks".into()))?;
    Ok(tape.scale(sum, F::one() / F::of(previous.len() as f64)))
}

/// Node handles into one traced evaluation of the unseen-task loss
/// `L_task + beta · L_R`.
#[derive(Clone, Copy, Debug)]
pub struct UnseenLossTrace {
    pub l_task: NodeId,
    pub l_r: Option<NodeId>,
    pub total: NodeId,
}

/// Traces the loss the server minimizes for a task with no stored basic
/// model. `delta` is the frozen candidate change for the regularizer;
/// passing `None` (or an empty `previous`) drops the history term.
#[allow(clippy::too_many_arguments)]
pub fn trace_unseen_loss<F: Scalar>(
    tape: &mut Tape<F>,
    hp: &HyperParams<F>,
    nodes: &[NodeId],
    identity: &TaskIdentity<F>,
    upload: &ModelWeights<F>,
    beta: F,
    delta: Option<&[Tensor<F>]>,
    previous: &[TaskIdentity<F>],
    prev_targets: &[ModelWeights<F>],
) -> Result<UnseenLossTrace> {
    let l_task = trace_task_loss(tape, hp, nodes, identity, upload)?;
    match delta.filter(|_| !previous.is_empty()) {
        Some(delta) => {
            let l_r = trace_history_loss(tape, hp, nodes, delta, previous, prev_targets)?;
            let scaled = tape.scale(l_r, beta);
            let total = tape.add(l_task, scaled)?;
            Ok(UnseenLossTrace {
                l_task,
                l_r: Some(l_r),
                total,
            })
        }
        None => Ok(UnseenLossTrace {
            l_task,
            l_r: None,
            total: l_task,
        }),
    }
}

/// Node handles into one traced evaluation of the known-task loss
/// `w_s · (L_hist + beta1 · L_R1) + (1 − w_s) · (L_up + beta2 · L_R2)`.
#[derive(Clone, Copy, Debug)]
pub struct KnownLossTrace {
    pub l_hist: NodeId,
    pub l_up: NodeId,
    pub l_r1: Option<NodeId>,
    pub l_r2: Option<NodeId>,
    pub total: NodeId,
}

/// Traces the loss the server minimizes for a task that already has a
/// stored basic model. `w_s` enters as a fixed coefficient; gradients do
/// not flow through the similarity computation.
#[allow(clippy::too_many_arguments)]
pub fn trace_known_loss<F: Scalar>(
    tape: &mut Tape<F>,
    hp: &HyperParams<F>,
    nodes: &[NodeId],
    identity: &TaskIdentity<F>,
    basic: &ModelWeights<F>,
    upload: &ModelWeights<F>,
    w_s: F,
    beta1: F,
    beta2: F,
    delta_hist: Option<&[Tensor<F>]>,
    delta_up: Option<&[Tensor<F>]>,
    previous: &[TaskIdentity<F>],
    prev_targets: &[ModelWeights<F>],
) -> Result<KnownLossTrace> {
    let gen = trace_generate(tape, hp, nodes, &identity.z)?;
    let l_hist = sum_layer_sq_diffs(tape, &gen, &layer_flats(basic))?;
    let l_up = sum_layer_sq_diffs(tape, &gen, &layer_flats(upload))?;
    let branch = |base: NodeId,
                      beta: F,
                      delta: Option<&[Tensor<F>]>,
                      tape: &mut Tape<F>|
     -> Result<(NodeId, Option<NodeId>)> {
        match delta.filter(|_| !previous.is_empty()) {
            Some(delta) => {
                let r = trace_history_loss(tape, hp, nodes, delta, previous, prev_targets)?;
                let scaled = tape.scale(r, beta);
                Ok((tape.add(base, scaled)?, Some(r)))
            }
            None => Ok((base, None)),
        }
    };
    let (branch1, l_r1) = branch(l_hist, beta1, delta_hist, tape)?;
    let (branch2, l_r2) = branch(l_up, beta2, delta_up, tape)?;
    let b1 = tape.scale(branch1, w_s);
    let b2 = tape.scale(branch2, F::one() - w_s);
    let total = tape.add(b1, b2)?;
    Ok(KnownLossTrace {
        l_hist,
        l_up,
        l_r1,
        l_r2,
        total,
    })
}

fn as_f64<F: Scalar>(v: F) -> f64 {
    v.to_f64().expect("loss values are finite f64-representable")
}
