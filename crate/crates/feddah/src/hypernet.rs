//! Task-identity-conditioned hypernetwork.
//!
//! The server never stores client models directly. It stores one set of
//! hypernetwork parameters that maps a task identity embedding to a full
//! set of client-model weights. Generation runs layer by layer:
//!
//! * each target layer has one head per input column plus one for the bias;
//!   a head maps the layer's context vector to a hidden embedding, and a
//!   shared output projection expands that embedding into one weight column
//!   (or the bias vector);
//! * a learned per-layer compressor summarizes the freshly generated layer
//!   into a short vector that is appended to the context, so deeper layers
//!   are conditioned on what was generated before them.
//!
//! The first layer's context is the task identity itself; the context for
//! layer `j` therefore has length `n_z · j` (identity plus `j − 1`
//! summaries).
//!
//! Task identities are immutable once registered: task `k` (in registration
//! order) draws its embedding from a normal distribution whose mean sits at
//! `k · mu_spacing`, so successive tasks occupy separated regions of the
//! embedding space. Draws depend only on the registry seed and `k`.

use crate::error::{Error, Result};
use crate::numcore::{NodeId, ParamSet, Scalar, Tape, Tensor};
use crate::rng::substream;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

// ─── client-model shape ─────────────────────────────────────────────────

/// Dimensions of one dense layer of the client model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub n_in: usize,
    pub n_out: usize,
}

/// Ordered layer dimensions of the client model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Builds a chain of dense layers from a dimension list, e.g.
    /// `[2, 32, 32, 1]` for a 2-input, two-hidden-layer, scalar-output MLP.
    pub fn chain(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "model spec needs at least two dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("model spec has a zero dim: {dims:?}")));
        }
        Ok(ModelSpec {
            layers: dims
                .windows(2)
                .map(|w| LayerSpec {
                    n_in: w[0],
                    n_out: w[1],
                })
                .collect(),
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].n_out
    }

    /// Parameter count of the client model itself.
    pub fn model_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.n_in * l.n_out + l.n_out)
            .sum()
    }
}

/// Full client-model weights: one `(w, b)` pair per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<F> {
    layers: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Scalar> ModelWeights<F> {
    /// Zero weights shaped like `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelWeights {
            layers: spec
                .layers
                .iter()
                .map(|l| (Tensor::zeros(&[l.n_out, l.n_in]), Tensor::zeros(&[l.n_out])))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<(Tensor<F>, Tensor<F>)>) -> Self {
        ModelWeights { layers }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, j: usize) -> (&Tensor<F>, &Tensor<F>) {
        (&self.layers[j].0, &self.layers[j].1)
    }

    pub fn layers(&self) -> &[(Tensor<F>, Tensor<F>)] {
        &self.layers
    }

    /// Reconstructs the layer structure these weights realize. Errors on
    /// malformed layers (wrong ranks or a bias not matching its weight) or
    /// consecutive layers whose dimensions do not chain.
    pub fn derive_spec(&self) -> Result<ModelSpec> {
        if self.layers.is_empty() {
            return Err(Error::shape("derive_spec", "no layers".to_string()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut prev_out = None;
        for (j, (w, b)) in self.layers.iter().enumerate() {
            if w.rank() != 2 || b.rank() != 1 || w.rows() != b.len() {
                return Err(Error::shape(
                    "derive_spec",
                    format!("layer {j} is not a matrix-vector pair"),
                ));
            }
            if let Some(prev) = prev_out {
                if w.cols() != prev {
                    return Err(Error::shape(
                        "derive_spec",
                        format!("layer {j} input {} does not chain from {prev}", w.cols()),
                    ));
                }
            }
            prev_out = Some(w.rows());
            layers.push(LayerSpec {
                n_in: w.cols(),
                n_out: w.rows(),
            });
        }
        Ok(ModelSpec { layers })
    }

    /// True when every layer of `self` matches `spec`.
    pub fn matches(&self, spec: &ModelSpec) -> bool {
        self.layers.len() == spec.layers.len()
            && self
                .layers
                .iter()
                .zip(&spec.layers)
                .all(|((w, b), l)| w.shape() == [l.n_out, l.n_in] && b.shape() == [l.n_out])
    }

    /// Layer `j` in generator order: weight columns first, then the bias.
    pub fn layer_flat_cols(&self, j: usize) -> Tensor<F> {
        let (w, b) = self.layer(j);
        let (rows, cols) = (w.rows(), w.cols());
        let mut data = Vec::with_capacity(rows * cols + rows);
        for c in 0..cols {
            for r in 0..rows {
                data.push(w.data()[r * cols + c]);
            }
        }
        data.extend_from_slice(b.data());
        Tensor::vector(data)
    }

    /// Every parameter in one flat vector (layer by layer, generator order).
    pub fn flatten(&self) -> Tensor<F> {
        let mut data = Vec::new();
        for j in 0..self.layers.len() {
            data.extend_from_slice(self.layer_flat_cols(j).data());
        }
        Tensor::vector(data)
    }

    /// Sum of squared elementwise differences across every parameter.
    pub fn sq_dist(&self, other: &Self) -> Result<F> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "model sq_dist",
                format!("{} vs {} layers", self.layers.len(), other.layers.len()),
            ));
        }
        let mut acc = F::zero();
        for (a, b) in self.layers.iter().zip(&other.layers) {
            acc += a.0.sq_dist(&b.0)?;
            acc += a.1.sq_dist(&b.1)?;
        }
        Ok(acc)
    }

    /// Total element count.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    /// Mean of per-layer weight averages with `other`, elementwise.
    pub fn average_with(&self, other: &Self) -> Result<Self> {
        let half = F::of(0.5);
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| {
                Ok((
                    a.0.add(&b.0)?.scale(half),
                    a.1.add(&b.1)?.scale(half),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelWeights { layers })
    }

    /// Named parameter set (`l{j}.w` / `l{j}.b`) for optimizers and tapes.
    pub fn to_param_set(&self) -> Result<ParamSet<F>> {
        let mut set = ParamSet::new();
        for (j, (w, b)) in self.layers.iter().enumerate() {
            set.push(format!("l{j}.w"), w.clone())?;
            set.push(format!("l{j}.b"), b.clone())?;
        }
        Ok(set)
    }

    /// Rebuilds weights from a set produced by [`Self::to_param_set`].
    pub fn from_param_set(spec: &ModelSpec, set: &ParamSet<F>) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layer_count());
        for (j, l) in spec.layers.iter().enumerate() {
            let w = set
                .get(&format!("l{j}.w"))
                .ok_or_else(|| Error::Config(format!("missing tensor l{j}.w")))?;
            let b = set
                .get(&format!("l{j}.b"))
                .ok_or_else(|| Error::Config(format!("missing tensor l{j}.b")))?;
            if w.shape() != [l.n_out, l.n_in] || b.shape() != [l.n_out] {
                return Err(Error::shape(
                    "from_param_set",
                    format!("layer {j}: {:?}/{:?}", w.shape(), b.shape()),
                ));
            }
            layers.push((w.clone(), b.clone()));
        }
        Ok(ModelWeights { layers })
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (j, (w, b)) in self.layers.iter().enumerate() {
            w.validate_finite(&format!("{context}: layer {j} weights"))?;
            b.validate_finite(&format!("{context}: layer {j} bias"))?;
        }
        Ok(())
    }

    /// Per-client-parameter mean of |self − other| (diagnostic).
    pub fn mean_abs_diff(&self, other: &Self) -> Result<F> {
        let d = self.sq_dist(other)?;
        Ok((d / F::of(self.param_count() as f64)).sqrt())
    }
}

// ─── task identities ────────────────────────────────────────────────────

/// Immutable embedding assigned to a task at registration.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskIdentity<F> {
    /// Registration index (0-based).
    pub index: usize,
    /// Mean of the sampling distribution for this identity.
    pub mu: F,
    /// Shared standard deviation of identity sampling.
    pub sigma: F,
    /// The embedding itself, length `n_z`.
    pub z: Tensor<F>,
}

/// Registry of task identities, keyed by task id.
///
/// Registration order determines the embedding distribution: task `k`
/// samples from `N(k · mu_spacing, sigma²)` per component, using a stream
/// derived from `(seed, k)` only, so re-registering the same sequence of
/// tasks reproduces identical embeddings bit for bit.
#[derive(Clone, Debug)]
pub struct TaskRegistry<F> {
    seed: u64,
    n_z: usize,
    mu_spacing: F,
    sigma: F,
    by_task: BTreeMap<String, TaskIdentity<F>>,
    order: Vec<String>,
}

impl<F: Scalar> TaskRegistry<F> {
    pub fn new(seed: u64, n_z: usize, mu_spacing: F, sigma: F) -> Result<Self> {
        if n_z == 0 {
            return Err(Error::Config("identity width n_z must be positive".into()));
        }
        Ok(TaskRegistry {
            seed,
            n_z,
            mu_spacing,
            sigma,
            by_task: BTreeMap::new(),
            order: Vec::new(),
        })
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, task_id: &str) -> bool {
        self.by_task.contains_key(task_id)
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskIdentity<F>> {
        self.by_task.get(task_id)
    }

    /// Task ids in registration order.
    pub fn order(&self) -> &[String] {
        &self.order
    }

    /// Assigns the next identity to `task_id`. Errors on re-registration.
    pub fn register(&mut self, task_id: &str) -> Result<&TaskIdentity<F>> {
        if self.by_task.contains_key(task_id) {
            return Err(Error::DuplicateTask(task_id.to_string()));
        }
        let index = self.order.len();
        let mu = self.mu_spacing * F::of(index as f64);
        let normal = Normal::new(
            mu.to_f64().expect("mu is finite"),
            self.sigma.to_f64().expect("sigma is finite"),
        )
        .map_err(|e| Error::Config(format!("identity distribution: {e}")))?;
        let mut rng = substream(self.seed, "task-identity", &[index as u64]);
        let z: Vec<F> = (0..self.n_z)
            .map(|_| F::of(normal.sample(&mut rng)))
            .collect();
        let identity = TaskIdentity {
            index,
            mu,
            sigma: self.sigma,
            z: Tensor::vector(z),
        };
        self.order.push(task_id.to_string());
        self.by_task.insert(task_id.to_string(), identity);
        Ok(&self.by_task[task_id])
    }
}

// ─── hypernetwork parameters ────────────────────────────────────────────

/// Slot indices of one generated layer's parameters inside the set.
#[derive(Clone, Debug)]
struct LayerLayout {
    ctx_len: usize,
    /// One `(w, b)` head per input column plus one for the bias.
    heads: Vec<(usize, usize)>,
    proj_w: usize,
    proj_b: usize,
    enc_w: usize,
    enc_b: usize,
}

/// Hypernetwork parameters for a fixed client-model spec.
#[derive(Clone, Debug)]
pub struct HyperParams<F> {
    spec: ModelSpec,
    n_z: usize,
    hidden: usize,
    params: ParamSet<F>,
    layout: Vec<LayerLayout>,
}

/// Closed-form parameter count of the hypernetwork for a given shape.
///
/// Per target layer `j` (1-based, context length `ctx = n_z · j`):
/// `(n_in + 1)` heads of `hidden · (ctx + 1)` parameters, one output
/// projection of `n_out · (hidden + 1)`, and one compressor of
/// `n_z · (n_in · n_out + n_out + 1)`.
pub fn hypernet_param_count(spec: &ModelSpec, n_z: usize, hidden: usize) -> Result<usize> {
    if n_z == 0 || hidden == 0 {
        return Err(Error::Config(format!(
            "hypernet dims must be positive (n_z={n_z}, hidden={hidden})"
        )));
    }
    let mut total = 0usize;
    for (j, l) in spec.layers().iter().enumerate() {
        let ctx = n_z * (j + 1);
        let heads = (l.n_in + 1) * (hidden * ctx + hidden);
        let proj = l.n_out * hidden + l.n_out;
        let enc = n_z * (l.n_in * l.n_out + l.n_out) + n_z;
        total += heads + proj + enc;
    }
    Ok(total)
}

impl<F: Scalar> HyperParams<F> {
    /// Initializes hypernetwork parameters.
    ///
    /// Heads draw from `N(0, 1/ctx)`, output projections from
    /// `N(0, 1/hidden)`, and compressors start at exactly zero, so the
    /// first context is the identity embedding padded with zeros.
    pub fn init(spec: ModelSpec, n_z: usize, hidden: usize, seed: u64) -> Result<Self> {
        hypernet_param_count(&spec, n_z, hidden)?;
        let mut rng = substream(seed, "hypernet-init", &[]);
        let mut params = ParamSet::new();
        let mut layout = Vec::with_capacity(spec.layer_count());
        for (j, l) in spec.layers().iter().enumerate() {
            let ctx = n_z * (j + 1);
            let head_std = (1.0 / ctx as f64).sqrt();
            let proj_std = (1.0 / hidden as f64).sqrt();
            let head_normal = Normal::new(0.0, head_std).expect("finite std");
            let proj_normal = Normal::new(0.0, proj_std).expect("finite std");
            let draw = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, dist: &Normal<f64>| {
                (0..n).map(|_| F::of(dist.sample(rng))).collect::<Vec<F>>()
            };
            let mut heads = Vec::with_capacity(l.n_in + 1);
            for i in 0..=l.n_in {
                let w = Tensor::matrix(hidden, ctx, draw(&mut rng, hidden * ctx, &head_normal))?;
                let b = Tensor::vector(draw(&mut rng, hidden, &head_normal));
                let w_slot = params.push(format!("l{j}.head{i}.w"), w)?;
                let b_slot = params.push(format!("l{j}.head{i}.b"), b)?;
                heads.push((w_slot, b_slot));
            }
            let proj_w = params.push(
                format!("l{j}.out.w"),
                Tensor::matrix(l.n_out, hidden, draw(&mut rng, l.n_out * hidden, &proj_normal))?,
            )?;
            let proj_b = params.push(
                format!("l{j}.out.b"),
                Tensor::vector(draw(&mut rng, l.n_out, &proj_normal)),
            )?;
            let flat_len = l.n_in * l.n_out + l.n_out;
            let enc_w = params.push(format!("l{j}.enc.w"), Tensor::zeros(&[n_z, flat_len]))?;
            let enc_b = params.push(format!("l{j}.enc.b"), Tensor::zeros(&[n_z]))?;
            layout.push(LayerLayout {
                ctx_len: ctx,
                heads,
                proj_w,
                proj_b,
                enc_w,
                enc_b,
            });
        }
        Ok(HyperParams {
            spec,
            n_z,
            hidden,
            params,
            layout,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_z(&self) -> usize {
        self.n_z
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamSet<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<F> {
        &mut self.params
    }

    /// Context length expected for target layer `j` (0-based).
    pub fn ctx_len(&self, j: usize) -> usize {
        self.layout[j].ctx_len
    }

    /// Total number of hypernetwork parameters.
    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }
}

// ─── generation ─────────────────────────────────────────────────────────

/// Node handles of one traced generation pass.
///
/// `layer_flat[j]` holds layer `j` in generator order (weight columns then
/// bias), the same layout as [`ModelWeights::layer_flat_cols`].
pub struct GeneratedNodes {
    pub layer_flat: Vec<NodeId>,
}

/// Records a full generation pass on `tape`, starting from parameter leaf
/// nodes (`nodes` aligns with `hp.params()` slots; shifted views built with
/// [`Tape::add`] are fine).
pub fn trace_generate<F: Scalar>(
    tape: &mut Tape<F>,
    hp: &HyperParams<F>,
    nodes: &[NodeId],
    z: &Tensor<F>,
) -> Result<GeneratedNodes> {
    if z.rank() != 1 || z.len() != hp.n_z {
        return Err(Error::shape(
            "trace_generate",
            format!("identity {:?} vs n_z {}", z.shape(), hp.n_z),
        ));
    }
    if nodes.len() != hp.params.len() {
        return Err(Error::shape(
            "trace_generate",
            format!("{} nodes vs {} params", nodes.len(), hp.params.len()),
        ));
    }
    let mut ctx = tape.constant(z.clone());
    let mut layer_flat = Vec::with_capacity(hp.spec.layer_count());
    let last = hp.spec.layer_count() - 1;
    for (j, l) in hp.layout.iter().enumerate() {
        let mut chunks = Vec::with_capacity(l.heads.len());
        for &(w_slot, b_slot) in &l.heads {
            let embed = tape.affine(nodes[w_slot], ctx, nodes[b_slot])?;
            let chunk = tape.affine(nodes[l.proj_w], embed, nodes[l.proj_b])?;
            chunks.push(chunk);
        }
        let flat = tape.concat(&chunks)?;
        layer_flat.push(flat);
        if j < last {
            let summary = tape.affine(nodes[l.enc_w], flat, nodes[l.enc_b])?;
            ctx = tape.concat(&[ctx, summary])?;
        }
    }
    Ok(GeneratedNodes { layer_flat })
}

/// Reassembles eager [`ModelWeights`] from a traced generation pass.
pub fn extract_weights<F: Scalar>(
    tape: &Tape<F>,
    gen: &GeneratedNodes,
    spec: &ModelSpec,
) -> Result<ModelWeights<F>> {
    let mut layers = Vec::with_capacity(spec.layer_count());
    for (j, l) in spec.layers().iter().enumerate() {
        let flat = tape.value(gen.layer_flat[j]).data();
        let mut w = vec![F::zero(); l.n_in * l.n_out];
        for c in 0..l.n_in {
            for r in 0..l.n_out {
                w[r * l.n_in + c] = flat[c * l.n_out + r];
            }
        }
        let b = flat[l.n_in * l.n_out..].to_vec();
        layers.push((Tensor::matrix(l.n_out, l.n_in, w)?, Tensor::vector(b)));
    }
    Ok(ModelWeights::from_layers(layers))
}

/// Generates the full client model for a task identity.
pub fn generate_model<F: Scalar>(
    hp: &HyperParams<F>,
    identity: &TaskIdentity<F>,
) -> Result<ModelWeights<F>> {
    let mut tape = Tape::new();
    let nodes = tape.params(&hp.params)?;
    let gen = trace_generate(&mut tape, hp, &nodes, &identity.z)?;
    let weights = extract_weights(&tape, &gen, &hp.spec)?;
    weights.validate_finite("generate_model output")?;
    Ok(weights)
}

/// Generates a single layer `(w, b)` from an explicit context vector.
pub fn generate_layer<F: Scalar>(
    hp: &HyperParams<F>,
    ctx: &Tensor<F>,
    j: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if j >= hp.spec.layer_count() {
        return Err(Error::Config(format!(
            "layer index {j} out of range ({} layers)",
            hp.spec.layer_count()
        )));
    }
    let layout = &hp.layout[j];
    if ctx.rank() != 1 || ctx.len() != layout.ctx_len {
        return Err(Error::shape(
            "generate_layer",
            format!("context {:?} vs expected length {}", ctx.shape(), layout.ctx_len),
        ));
    }
    let l = hp.spec.layers()[j];
    let proj_w = hp.params.tensor(layout.proj_w);
    let proj_b = hp.params.tensor(layout.proj_b);
    let mut cols = Vec::with_capacity(l.n_in + 1);
    for &(w_slot, b_slot) in &layout.heads {
        let embed = hp
            .params
            .tensor(w_slot)
            .matvec(ctx)?
            .add(hp.params.tensor(b_slot))?;
        cols.push(proj_w.matvec(&embed)?.add(proj_b)?);
    }
    let bias = cols.pop().expect("one head per input column plus bias");
    let mut w = vec![F::zero(); l.n_in * l.n_out];
    for (c, col) in cols.iter().enumerate() {
        for r in 0..l.n_out {
            w[r * l.n_in + c] = col.data()[r];
        }
    }
    let w = Tensor::matrix(l.n_out, l.n_in, w)?;
    w.validate_finite("generate_layer weights")?;
    bias.validate_finite("generate_layer bias")?;
    Ok((w, bias))
}

/// Compresses a generated layer into the next context summary.
///
/// The layer is flattened in generator order (weight columns, then bias)
/// before the affine compressor is applied.
pub fn encode_layer<F: Scalar>(
    hp: &HyperParams<F>,
    j: usize,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    if j >= hp.spec.layer_count() {
        return Err(Error::Config(format!(
            "layer index {j} out of range ({} layers)",
            hp.spec.layer_count()
        )));
    }
    let l = hp.spec.layers()[j];
    if w.shape() != [l.n_out, l.n_in] || b.shape() != [l.n_out] {
        return Err(Error::shape(
            "encode_layer",
            format!("layer {j}: {:?}/{:?}", w.shape(), b.shape()),
        ));
    }
    let flat = ModelWeights::from_layers(vec![(w.clone(), b.clone())]).layer_flat_cols(0);
    let layout = &hp.layout[j];
    let out = hp
        .params
        .tensor(layout.enc_w)
        .matvec(&flat)?
        .add(hp.params.tensor(layout.enc_b))?;
    out.validate_finite("encode_layer output")?;
    Ok(out)
}
