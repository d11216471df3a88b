//! Experiment orchestration: asynchronous task streams, the round loop,
//! and the alternative server strategies used as baselines.
//!
//! Every client walks its own ordered task stream, spending a fixed number
//! of rounds on each task before moving to the next. Streams open with a
//! shared warm-up prefix every client sees in the same order; the rest is
//! a per-client shuffle of the shared pool plus that client's unique
//! tasks, so clients reach the same task in different rounds.
//!
//! One round is: every client downloads the weights its server strategy
//! can offer for its current task (or keeps its own), trains locally, and
//! uploads; the server applies all uploads; every client-visible task is
//! then scored on its shared test set.

use crate::amr::{AmrConfig, ServerOptimizer, ServerState, SimilaritySource, TaskRecord};
use crate::client::{
    evaluate, init_model, local_train, make_task, ClientUpdate, Dataset, SyntheticTask, TaskLabel,
    TrainConfig,
};
use crate::error::{Error, Result};
use crate::hypernet::{HyperParams, ModelSpec, ModelWeights, TaskRegistry};
use crate::numcore::Scalar;
use crate::rng::substream;
use std::collections::{BTreeMap, BTreeSet};

// ─── modes ──────────────────────────────────────────────────────────────

/// Which training strategy an experiment runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    /// Hypernetwork server with the full recalibration loss.
    Full,
    /// Hypernetwork server with the history regularizer removed.
    NoLr,
    /// Hypernetwork server with the similarity weight pinned to zero.
    NoWs,
    /// No hypernetwork: the server keeps one stored model per task and
    /// averages every upload for a task into it, including the stale
    /// stored copy from earlier rounds.
    NoDahyper,
    /// One global model, re-averaged over all uploads every round.
    FedavgCl,
    /// No server model at all; clients keep their own weights.
    LocalOnly,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "no_lr" => Ok(Mode::NoLr),
            "no_ws" => Ok(Mode::NoWs),
            "no_dahyper" => Ok(Mode::NoDahyper),
            "fedavg_cl" => Ok(Mode::FedavgCl),
            "local_only" => Ok(Mode::LocalOnly),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected full, no_lr, no_ws, no_dahyper, fedavg_cl, or local_only)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoLr => "no_lr",
            Mode::NoWs => "no_ws",
            Mode::NoDahyper => "no_dahyper",
            Mode::FedavgCl => "fedavg_cl",
            Mode::LocalOnly => "local_only",
        }
    }

    pub fn all() -> [Mode; 6] {
        [
            Mode::Full,
            Mode::NoLr,
            Mode::NoWs,
            Mode::NoDahyper,
            Mode::FedavgCl,
            Mode::LocalOnly,
        ]
    }

    pub fn uses_hypernet(&self) -> bool {
        matches!(self, Mode::Full | Mode::NoLr | Mode::NoWs)
    }
}

// ─── experiment plan ────────────────────────────────────────────────────

/// Fully resolved description of one experiment run.
#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub seed: u64,
    pub mode: Mode,
    pub clients: usize,
    /// Local epochs per round.
    pub epochs: usize,
    /// Rounds a client spends on each task of its stream.
    pub rounds_per_task: usize,
    /// Identity embedding width.
    pub n_z: usize,
    /// Hypernetwork head width.
    pub hidden: usize,
    pub mu_spacing: f64,
    pub sigma: f64,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub n_inner: usize,
    pub n_server: usize,
    pub lr_client: f64,
    pub lr_server: f64,
    pub bins: usize,
    pub smoothing: f64,
    /// Client-model layer dims, e.g. `[2, 8, 1]`.
    pub model_dims: Vec<usize>,
    /// Warm-up tasks every client starts with, in this order.
    pub shared_initial: Vec<TaskLabel>,
    /// Tasks every client sees somewhere in its stream.
    pub shared: Vec<TaskLabel>,
    /// Tasks split evenly between clients, in chunks, by list order.
    pub unique: Vec<TaskLabel>,
    /// Training samples per client per task.
    pub train_samples: usize,
    /// Test samples per task (shared across clients).
    pub test_samples: usize,
    /// Standard deviation of additive observation noise on regression
    /// training targets. Zero means clean targets. Test sets are always
    /// noise-free.
    pub train_noise: f64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            seed: 42,
            mode: Mode::Full,
            clients: 4,
            epochs: 5,
            rounds_per_task: 20,
            n_z: 32,
            hidden: 64,
            mu_spacing: 2.0,
            sigma: 0.5,
            beta: 0.01,
            beta1: 0.01,
            beta2: 0.01,
            n_inner: 1,
            n_server: 20,
            lr_client: 1e-3,
            lr_server: 1e-3,
            bins: 64,
            smoothing: 1e-8,
            model_dims: vec![2, 32, 32, 1],
            shared_initial: Vec::new(),
            shared: Vec::new(),
            unique: Vec::new(),
            train_samples: 24,
            test_samples: 16,
            train_noise: 0.0,
        }
    }
}

impl ExperimentPlan {
    /// The benchmark stream layout: four clients, two warm-up tasks, five
    /// shared tasks, and two unique tasks per client, with a compact
    /// hypernetwork so a full run stays cheap on one core.
    pub fn benchmark(seed: u64, mode: Mode) -> Self {
        let labels = |specs: &[&str]| -> Vec<TaskLabel> {
            specs
                .iter()
                .map(|s| TaskLabel::parse(s).expect("benchmark task labels are valid"))
                .collect()
        };
        ExperimentPlan {
            seed,
            mode,
            n_z: 32,
            hidden: 24,
            mu_spacing: 0.0,
            sigma: 1.0,
            beta: 0.15,
            beta1: 0.01,
            beta2: 0.01,
            train_samples: 6,
            test_samples: 64,
            train_noise: 0.5,
            n_server: 40,
            lr_server: 4e-4,
            shared_initial: labels(&["sine:warm0", "poly:warm1"]),
            shared: labels(&["sine:sh0", "poly:sh1", "sine:sh2", "poly:sh3", "sine:sh4"]),
            unique: labels(&[
                "sine:u0", "poly:u1", "sine:u2", "poly:u3", "sine:u4", "poly:u5", "sine:u6",
                "poly:u7",
            ]),
            ..ExperimentPlan::default()
        }
    }

    /// The canonical task list: warm-up, then shared, then unique tasks,
    /// in declaration order. A task's position here is its stable index
    /// for data generation.
    pub fn task_list(&self) -> Vec<TaskLabel> {
        self.shared_initial
            .iter()
            .chain(&self.shared)
            .chain(&self.unique)
            .cloned()
            .collect()
    }

    pub fn stream_len(&self) -> usize {
        self.shared_initial.len() + self.shared.len() + self.unique.len() / self.clients.max(1)
    }

    pub fn total_rounds(&self) -> usize {
        self.stream_len() * self.rounds_per_task
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Config("experiment needs at least one client".into()));
        }
        if self.rounds_per_task == 0 {
            return Err(Error::Config("rounds_per_task must be positive".into()));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !self.train_noise.is_finite() || self.train_noise < 0.0 {
            return Err(Error::Config(
                "train_noise must be finite and non-negative".into(),
            ));
        }
        if self.model_dims.len() < 2 {
            return Err(Error::Config("model_dims needs at least two entries".into()));
        }
        let tasks = self.task_list();
        if tasks.is_empty() {
            return Err(Error::Config("experiment has no tasks".into()));
        }
        if !self.unique.is_empty() && !self.unique.len().is_multiple_of(self.clients) {
            return Err(Error::Config(format!(
                "{} unique tasks cannot be split evenly over {} clients",
                self.unique.len(),
                self.clients
            )));
        }
        let mut seen = BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.id()) {
                return Err(Error::DuplicateTask(t.id()));
            }
        }
        let out = tasks[0].family.output_dim();
        if tasks.iter().any(|t| t.family.output_dim() != out) {
            return Err(Error::Config(
                "all tasks in one experiment must share an output dimension".into(),
            ));
        }
        let dims = &self.model_dims;
        if dims[dims.len() - 1] != out {
            return Err(Error::Config(format!(
                "model output dim {} does not match task output dim {out}",
                dims[dims.len() - 1]
            )));
        }
        Ok(())
    }

    fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::chain(&self.model_dims)
    }

    fn amr_config(&self) -> AmrConfig<f64> {
        let (beta, beta1, beta2) = if self.mode == Mode::NoLr {
            (0.0, 0.0, 0.0)
        } else {
            (self.beta, self.beta1, self.beta2)
        };
        AmrConfig {
            lr: self.lr_server,
            beta,
            beta1,
            beta2,
            n_inner: self.n_inner,
            n_server: self.n_server,
            bins: self.bins,
            smoothing: self.smoothing,
            optimizer: ServerOptimizer::Adam,
            similarity_source: SimilaritySource::Generated,
            use_similarity: self.mode != Mode::NoWs,
        }
    }
}

/// Zero-padded client id, so lexicographic order equals numeric order.
pub fn client_id(index: usize, count: usize) -> String {
    let width = (count.max(1) - 1).to_string().len();
    format!("c{index:0width$}")
}

// ─── server strategies ──────────────────────────────────────────────────

/// Server-side state for each [`Mode`] family.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Server<F> {
    Hypernet(ServerState<F>),
    TaskAveraging {
        stored: BTreeMap<String, ModelWeights<F>>,
    },
    GlobalAveraging {
        global: ModelWeights<F>,
    },
    LocalOnly,
}

impl<F: Scalar> Server<F> {
    /// The model the server would hand out for `task_id`, if it has one.
    pub fn offering(&self, task_id: &str) -> Result<Option<ModelWeights<F>>> {
        match self {
            Server::Hypernet(state) => {
                if state.registry().contains(task_id) {
                    Ok(Some(state.generate_for(task_id)?))
                } else {
                    Ok(None)
                }
            }
            Server::TaskAveraging { stored } => Ok(stored.get(task_id).cloned()),
            Server::GlobalAveraging { global } => Ok(Some(global.clone())),
            Server::LocalOnly => Ok(None),
        }
    }

    pub fn as_hypernet(&self) -> Option<&ServerState<F>> {
        match self {
            Server::Hypernet(state) => Some(state),
            _ => None,
        }
    }
}

// ─── metrics rows ───────────────────────────────────────────────────────

/// One evaluation row of `metrics.csv`. Rows with `client_id == "server"`
/// score the server's own per-task models; all other rows score the model
/// the named client would deploy for the task under the active mode.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub round: u64,
    pub client_id: String,
    pub task_id: String,
    pub test_loss: f64,
    pub test_accuracy: Option<f64>,
}

/// Pseudo client id used for server-side evaluation rows.
pub const SERVER_CLIENT_ID: &str = "server";

// ─── the simulation ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
struct ClientState<F> {
    id: String,
    weights: ModelWeights<F>,
}

/// Everything produced by one round.
#[derive(Clone, Debug)]
pub struct RoundOutput {
    pub metrics: Vec<MetricRow>,
    pub records: Vec<TaskRecord>,
}

/// Complete result of a finished experiment.
#[derive(Clone, Debug)]
pub struct ExperimentResult<F> {
    pub metrics: Vec<MetricRow>,
    pub records: Vec<TaskRecord>,
    pub simulation: Simulation<F>,
}

/// A running experiment: tasks, streams, client states, and the server.
#[derive(Clone, Debug)]
pub struct Simulation<F> {
    plan: ExperimentPlan,
    tasks: BTreeMap<String, SyntheticTask<F>>,
    streams: Vec<Vec<String>>,
    clients: Vec<ClientState<F>>,
    server: Server<F>,
    round: u64,
    train_cache: BTreeMap<(usize, String), Dataset<F>>,
}

impl<F: Scalar> Simulation<F> {
    pub fn new(plan: ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let spec = plan.model_spec()?;
        let labels = plan.task_list();

        let mut tasks = BTreeMap::new();
        for (index, label) in labels.iter().enumerate() {
            let task = make_task::<F>(
                label,
                index as u64,
                spec.input_dim(),
                plan.test_samples,
                plan.seed,
            )?;
            tasks.insert(label.id(), task);
        }

        let streams = build_streams(&plan)?;
        let clients = (0..plan.clients)
            .map(|c| {
                let mut rng = substream(plan.seed, "client-init", &[c as u64]);
                ClientState {
                    id: client_id(c, plan.clients),
                    weights: init_model(&spec, &mut rng),
                }
            })
            .collect();

        let server = match plan.mode {
            Mode::Full | Mode::NoLr | Mode::NoWs => {
                let hp = HyperParams::init(spec.clone(), plan.n_z, plan.hidden, plan.seed)?;
                let registry = TaskRegistry::new(
                    plan.seed,
                    plan.n_z,
                    F::of(plan.mu_spacing),
                    F::of(plan.sigma),
                )?;
                let cfg = plan.amr_config();
                cfg.validate()?;
                let cfg = AmrConfig {
                    lr: F::of(plan.lr_server),
                    beta: F::of(cfg.beta),
                    beta1: F::of(cfg.beta1),
                    beta2: F::of(cfg.beta2),
                    n_inner: cfg.n_inner,
                    n_server: cfg.n_server,
                    bins: cfg.bins,
                    smoothing: F::of(cfg.smoothing),
                    optimizer: cfg.optimizer,
                    similarity_source: cfg.similarity_source,
                    use_similarity: cfg.use_similarity,
                };
                Server::Hypernet(ServerState::new(hp, registry, cfg)?)
            }
            Mode::NoDahyper => Server::TaskAveraging {
                stored: BTreeMap::new(),
            },
            Mode::FedavgCl => {
                let mut rng = substream(plan.seed, "server-init", &[]);
                Server::GlobalAveraging {
                    global: init_model(&spec, &mut rng),
                }
            }
            Mode::LocalOnly => Server::LocalOnly,
        };

        Ok(Simulation {
            plan,
            tasks,
            streams,
            clients,
            server,
            round: 0,
            train_cache: BTreeMap::new(),
        })
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    pub fn server(&self) -> &Server<F> {
        &self.server
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn streams(&self) -> &[Vec<String>] {
        &self.streams
    }

    pub fn task(&self, id: &str) -> Option<&SyntheticTask<F>> {
        self.tasks.get(id)
    }

    pub fn is_finished(&self) -> bool {
        self.round as usize >= self.plan.total_rounds()
    }

    /// The task client `c` trains on at round `r`; rounds past the end of
    /// the schedule stay on the final task.
    pub fn current_task(&self, client: usize, round: u64) -> &str {
        let pos = (round as usize / self.plan.rounds_per_task).min(self.streams[client].len() - 1);
        &self.streams[client][pos]
    }

    /// Tasks client `c` has reached by round `r`, in stream order.
    pub fn seen_tasks(&self, client: usize, round: u64) -> &[String] {
        let pos = (round as usize / self.plan.rounds_per_task).min(self.streams[client].len() - 1);
        &self.streams[client][..=pos]
    }

    fn train_data(&mut self, client: usize, task_id: &str) -> Result<Dataset<F>> {
        let key = (client, task_id.to_string());
        if let Some(d) = self.train_cache.get(&key) {
            return Ok(d.clone());
        }
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        let data = task.noisy_train_view(
            client as u64,
            self.plan.train_samples,
            self.plan.seed,
            F::of(self.plan.train_noise),
        );
        self.train_cache.insert(key, data.clone());
        Ok(data)
    }

    /// Runs the next round: local training on every client, one server
    /// update, then evaluation. State is committed only when the whole
    /// round succeeds.
    pub fn run_round(&mut self) -> Result<RoundOutput> {
        if self.is_finished() {
            return Err(Error::Config(format!(
                "experiment already finished after {} rounds",
                self.plan.total_rounds()
            )));
        }
        let round = self.round;
        let mut server = self.server.clone();
        let mut clients = self.clients.clone();

        // Local phase, clients in ascending id order.
        let mut uploads = Vec::with_capacity(clients.len());
        for (c, client) in clients.iter_mut().enumerate() {
            let task_id = self.current_task(c, round).to_string();
            let start = match server.offering(&task_id)? {
                Some(w) => w,
                None => client.weights.clone(),
            };
            let data = self.train_data(c, &task_id)?;
            let mut rng = substream(self.plan.seed, "shuffle", &[round, c as u64]);
            let cfg = TrainConfig {
                epochs: self.plan.epochs,
                lr: F::of(self.plan.lr_client),
            };
            let (trained, train_loss) = local_train(&start, &data, &cfg, &mut rng)?;
            client.weights = trained.clone();
            uploads.push(ClientUpdate {
                client_id: client.id.clone(),
                task_id,
                weights: trained,
                train_loss,
            });
        }

        // Server phase.
        let records = apply_server_update(&mut server, &uploads, round)?;

        // Evaluation phase: every client against every task's test set.
        // The weights a client deploys for a task are the server's current
        // offering for it, falling back to the client's own weights when
        // the server has nothing for that task.
        let mut metrics = Vec::new();
        for client in &clients {
            for label in self.plan.task_list() {
                let task_id = label.id();
                let weights = match server.offering(&task_id)? {
                    Some(w) => w,
                    None => client.weights.clone(),
                };
                metrics.push(self.eval_row(round, &client.id, &task_id, &weights)?);
            }
        }

        self.server = server;
        self.clients = clients;
        self.round += 1;
        Ok(RoundOutput { metrics, records })
    }

    fn eval_row(
        &self,
        round: u64,
        client_id: &str,
        task_id: &str,
        weights: &ModelWeights<F>,
    ) -> Result<MetricRow> {
        let task = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        let r = evaluate(weights, task.test_set())?;
        Ok(MetricRow {
            round,
            client_id: client_id.to_string(),
            task_id: task_id.to_string(),
            test_loss: r.loss.to_f64().ok_or_else(|| Error::NonFinite {
                context: format!("test loss for {task_id}"),
            })?,
            test_accuracy: r.accuracy.map(|a| a.to_f64().expect("accuracy is a ratio")),
        })
    }
}

/// Builds every client's stream: the warm-up prefix in declared order,
/// then a per-client shuffle of the shared pool plus the client's chunk of
/// unique tasks.
pub fn build_streams(plan: &ExperimentPlan) -> Result<Vec<Vec<String>>> {
    plan.validate()?;
    let per_client = if plan.unique.is_empty() {
        0
    } else {
        plan.unique.len() / plan.clients
    };
    let mut streams = Vec::with_capacity(plan.clients);
    for c in 0..plan.clients {
        let mut tail: Vec<String> = plan
            .shared
            .iter()
            .map(TaskLabel::id)
            .chain(
                plan.unique[c * per_client..(c + 1) * per_client]
                    .iter()
                    .map(TaskLabel::id),
            )
            .collect();
        let mut rng = substream(plan.seed, "stream", &[c as u64]);
        {
            use rand::seq::SliceRandom;
            tail.shuffle(&mut rng);
        }
        let mut stream: Vec<String> = plan.shared_initial.iter().map(TaskLabel::id).collect();
        stream.extend(tail);
        streams.push(stream);
    }
    Ok(streams)
}

/// Applies one round of uploads to whichever server strategy is active,
/// returning uniform per-task records. Non-hypernetwork strategies have no
/// optimization losses; their loss fields are zero and `w_s` is null.
fn apply_server_update<F: Scalar>(
    server: &mut Server<F>,
    uploads: &[ClientUpdate<F>],
    round: u64,
) -> Result<Vec<TaskRecord>> {
    match server {
        Server::Hypernet(state) => {
            for up in uploads {
                if !state.registry().contains(&up.task_id) {
                    state.registry_mut().register(&up.task_id)?;
                }
            }
            crate::amr::server_update(state, uploads, round)
        }
        Server::TaskAveraging { stored } => {
            let groups = group_uploads(uploads);
            let mut records = Vec::with_capacity(groups.len());
            for (task_id, members) in groups {
                let mut pool: Vec<&ModelWeights<F>> =
                    members.iter().map(|u| &u.weights).collect();
                let old = stored.get(&task_id).cloned();
                if let Some(prev) = &old {
                    pool.push(prev);
                }
                let merged = mean_weights(&pool)?;
                let delta_norm = match &old {
                    Some(prev) => prev.sq_dist(&merged)?.to_f64().expect("finite").sqrt(),
                    None => 0.0,
                };
                stored.insert(task_id.clone(), merged);
                records.push(empty_record(round, task_id, &members, delta_norm));
            }
            Ok(records)
        }
        Server::GlobalAveraging { global } => {
            let pool: Vec<&ModelWeights<F>> = uploads.iter().map(|u| &u.weights).collect();
            let merged = mean_weights(&pool)?;
            let delta_norm = global.sq_dist(&merged)?.to_f64().expect("finite").sqrt();
            *global = merged;
            let groups = group_uploads(uploads);
            Ok(groups
                .into_iter()
                .map(|(task_id, members)| empty_record(round, task_id, &members, delta_norm))
                .collect())
        }
        Server::LocalOnly => {
            let groups = group_uploads(uploads);
            Ok(groups
                .into_iter()
                .map(|(task_id, members)| empty_record(round, task_id, &members, 0.0))
                .collect())
        }
    }
}

fn group_uploads<F>(uploads: &[ClientUpdate<F>]) -> Vec<(String, Vec<&ClientUpdate<F>>)> {
    let mut groups: Vec<(String, Vec<&ClientUpdate<F>>)> = Vec::new();
    for up in uploads {
        match groups.iter_mut().find(|(t, _)| *t == up.task_id) {
            Some((_, list)) => list.push(up),
            None => groups.push((up.task_id.clone(), vec![up])),
        }
    }
    for (_, list) in &mut groups {
        list.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    }
    groups
}

fn empty_record<F>(
    round: u64,
    task_id: String,
    members: &[&ClientUpdate<F>],
    delta_norm: f64,
) -> TaskRecord {
    TaskRecord {
        round,
        task_id,
        client_ids: members.iter().map(|u| u.client_id.clone()).collect(),
        w_s: None,
        l_task_hist: None,
        l_task_upload: 0.0,
        l_r1: None,
        l_r2: 0.0,
        total_loss: 0.0,
        delta_norm,
    }
}

fn mean_weights<F: Scalar>(pool: &[&ModelWeights<F>]) -> Result<ModelWeights<F>> {
    let first = pool.first().ok_or_else(|| {
        Error::Config("cannot average an empty set of weight sets".into())
    })?;
    let scale = F::one() / F::of(pool.len() as f64);
    let layers = (0..first.layer_count())
        .map(|j| {
            let (w0, b0) = first.layer(j);
            let mut w = crate::numcore::Tensor::zeros(w0.shape());
            let mut b = crate::numcore::Tensor::zeros(b0.shape());
            for m in pool {
                let (wm, bm) = m.layer(j);
                w = w.add(wm)?;
                b = b.add(bm)?;
            }
            Ok((w.scale(scale), b.scale(scale)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelWeights::from_layers(layers))
}

/// Runs a whole experiment from a plan, collecting every round's metrics
/// and records.
pub fn run_experiment<F: Scalar>(plan: ExperimentPlan) -> Result<ExperimentResult<F>> {
    let mut sim = Simulation::new(plan)?;
    let mut metrics = Vec::new();
    let mut records = Vec::new();
    while !sim.is_finished() {
        let out = sim.run_round()?;
        metrics.extend(out.metrics);
        records.extend(out.records);
    }
    Ok(ExperimentResult {
        metrics,
        records,
        simulation: sim,
    })
}
