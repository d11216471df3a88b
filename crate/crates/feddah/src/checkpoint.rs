//! Binary snapshot of a finished run's server state.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "FDAH" | u32 version | u8 kind
//! u64 tensor count
//!   per tensor: u32 name len | name utf-8 | u32 rank | u64 dims… | f64 data…
//! u64 registry count
//!   per entry: u32 id len | id utf-8 | u64 index | f64 mu | f64 sigma
//!              | u64 z len | f64 z…
//! u64 stored-round count
//!   per entry: u32 id len | id utf-8 | u64 round
//! ```
//!
//! Encoding preserves every bit of every float (including negative zeros
//! and subnormals), so encode → decode → encode reproduces identical
//! bytes.

use crate::error::{Error, Result};
use crate::federation::Server;
use crate::numcore::{Scalar, Tensor};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FDAH";
const VERSION: u32 = 1;

/// Which server strategy produced the snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Hypernet,
    TaskAveraging,
    GlobalAveraging,
    LocalOnly,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Hypernet => 0,
            CheckpointKind::TaskAveraging => 1,
            CheckpointKind::GlobalAveraging => 2,
            CheckpointKind::LocalOnly => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(CheckpointKind::Hypernet),
            1 => Ok(CheckpointKind::TaskAveraging),
            2 => Ok(CheckpointKind::GlobalAveraging),
            3 => Ok(CheckpointKind::LocalOnly),
            other => Err(Error::Checkpoint(format!("unknown server kind {other}"))),
        }
    }
}

/// One registered task identity as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RegistryEntry {
    pub task_id: String,
    pub index: u64,
    pub mu: f64,
    pub sigma: f64,
    pub z: Vec<f64>,
}

/// Decoded snapshot contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub registry: Vec<RegistryEntry>,
    /// Last update round per stored basic model, by task id.
    pub stored_rounds: Vec<(String, u64)>,
}

/// Captures the server side of a finished simulation.
pub fn checkpoint_of_server<F: Scalar>(server: &Server<F>) -> Checkpoint {
    let tensor64 = |t: &Tensor<F>| -> Tensor<f64> {
        Tensor::from_vec(
            t.shape(),
            t.data()
                .iter()
                .map(|v| v.to_f64().expect("weights are f64-representable"))
                .collect(),
        )
        .expect("same shape")
    };
    match server {
        Server::Hypernet(state) => {
            let mut tensors = Vec::new();
            for (name, t) in state.hp().params().iter() {
                tensors.push((format!("hp.{name}"), tensor64(t)));
            }
            let mut stored_rounds = Vec::new();
            for task in state.basic_tasks().map(str::to_string).collect::<Vec<_>>() {
                let basic = state.basic(&task).expect("listed task");
                for (j, (w, b)) in basic.weights.layers().iter().enumerate() {
                    tensors.push((format!("basic.{task}.l{j}.w"), tensor64(w)));
                    tensors.push((format!("basic.{task}.l{j}.b"), tensor64(b)));
                }
                stored_rounds.push((task, basic.round_updated));
            }
            let registry = state
                .registry()
                .order()
                .iter()
                .map(|id| {
                    let ident = state.registry().get(id).expect("ordered task");
                    RegistryEntry {
                        task_id: id.clone(),
                        index: ident.index as u64,
                        mu: ident.mu.to_f64().expect("finite"),
                        sigma: ident.sigma.to_f64().expect("finite"),
                        z: ident
                            .z
                            .data()
                            .iter()
                            .map(|v| v.to_f64().expect("finite"))
                            .collect(),
                    }
                })
                .collect();
            Checkpoint {
                kind: CheckpointKind::Hypernet,
                tensors,
                registry,
                stored_rounds,
            }
        }
        Server::TaskAveraging { stored } => {
            let mut tensors = Vec::new();
            for (task, w) in stored {
                for (j, (wt, bt)) in w.layers().iter().enumerate() {
                    tensors.push((format!("stored.{task}.l{j}.w"), tensor64(wt)));
                    tensors.push((format!("stored.{task}.l{j}.b"), tensor64(bt)));
                }
            }
            Checkpoint {
                kind: CheckpointKind::TaskAveraging,
                tensors,
                registry: Vec::new(),
                stored_rounds: Vec::new(),
            }
        }
        Server::GlobalAveraging { global } => {
            let tensors = global
                .layers()
                .iter()
                .enumerate()
                .flat_map(|(j, (w, b))| {
                    [
                        (format!("global.l{j}.w"), tensor64(w)),
                        (format!("global.l{j}.b"), tensor64(b)),
                    ]
                })
                .collect();
            Checkpoint {
                kind: CheckpointKind::GlobalAveraging,
                tensors,
                registry: Vec::new(),
                stored_rounds: Vec::new(),
            }
        }
        Server::LocalOnly => Checkpoint {
            kind: CheckpointKind::LocalOnly,
            tensors: Vec::new(),
            registry: Vec::new(),
            stored_rounds: Vec::new(),
        },
    }
}

// ─── encoding ───────────────────────────────────────────────────────────

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(cp: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(cp.kind.code());

    out.extend_from_slice(&(cp.tensors.len() as u64).to_le_bytes());
    for (name, t) in &cp.tensors {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    out.extend_from_slice(&(cp.registry.len() as u64).to_le_bytes());
    for e in &cp.registry {
        put_str(&mut out, &e.task_id);
        out.extend_from_slice(&e.index.to_le_bytes());
        out.extend_from_slice(&e.mu.to_le_bytes());
        out.extend_from_slice(&e.sigma.to_le_bytes());
        out.extend_from_slice(&(e.z.len() as u64).to_le_bytes());
        for &v in &e.z {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    out.extend_from_slice(&(cp.stored_rounds.len() as u64).to_le_bytes());
    for (task, round) in &cp.stored_rounds {
        put_str(&mut out, task);
        out.extend_from_slice(&round.to_le_bytes());
    }
    out
}

// ─── decoding ───────────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more of {})",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad utf-8 name: {e}")))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()?;
        // Every counted item occupies at least one byte; a count beyond
        // the remaining length is corruption, not a huge snapshot.
        if n as usize > self.bytes.len().saturating_sub(self.pos) {
            return Err(Error::Checkpoint(format!("implausible {what} count {n}")));
        }
        Ok(n as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not a snapshot file)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let kind = CheckpointKind::from_code(r.u8()?)?;

    let n_tensors = r.count("tensor")?;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        if len > bytes.len() {
            return Err(Error::Checkpoint(format!("implausible tensor size {len}")));
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }

    let n_reg = r.count("registry")?;
    let mut registry = Vec::with_capacity(n_reg);
    for _ in 0..n_reg {
        let task_id = r.string()?;
        let index = r.u64()?;
        let mu = r.f64()?;
        let sigma = r.f64()?;
        let z_len = r.count("identity component")?;
        let mut z = Vec::with_capacity(z_len);
        for _ in 0..z_len {
            z.push(r.f64()?);
        }
        registry.push(RegistryEntry {
            task_id,
            index,
            mu,
            sigma,
            z,
        });
    }

    let n_rounds = r.count("stored-round")?;
    let mut stored_rounds = Vec::with_capacity(n_rounds);
    for _ in 0..n_rounds {
        let task = r.string()?;
        stored_rounds.push((task, r.u64()?));
    }

    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after snapshot",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        kind,
        tensors,
        registry,
        stored_rounds,
    })
}

pub fn save(path: &Path, cp: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(cp)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
