//! FedDAH: a deterministic simulator for server-side federated continual
//! learning.
//!
//! A task-identity-conditioned hypernetwork (`hypernet`) generates full
//! client-model weights on the server. Asynchronous per-client task streams
//! (`federation`) feed uploaded weights into an adaptive recalibration
//! update (`amr`) that balances fresh uploads against the server's stored
//! task knowledge while regularizing against forgetting. `client` simulates
//! local training on synthetic tasks, `metrics` turns the recorded
//! evaluations into forgetting/averaging summaries, and `config` plus the
//! `feddah` binary wrap everything in a reproducible CLI.
//!
//! Every run is a pure function of its configuration and seed: artifacts
//! (`metrics.csv`, `rounds.jsonl`, `checkpoint.fdah`) are byte-identical
//! across repeated runs.

pub mod amr;
pub mod artifacts;
pub mod checkpoint;
pub mod client;
pub mod config;
pub mod error;
pub mod federation;
pub mod hypernet;
pub mod metrics;
pub mod numcore;
pub mod rng;

pub use error::{Error, Result};

/// Scalar type used by the simulator and CLI.
pub type Real = f64;

/// Tensor specialized to the simulator scalar.
pub type Tensor = numcore::Tensor<Real>;

/// Parameter collection specialized to the simulator scalar.
pub type ParamSet = numcore::ParamSet<Real>;

/// Client-model weights specialized to the simulator scalar.
pub type ModelWeights = hypernet::ModelWeights<Real>;

/// Hypernetwork parameters specialized to the simulator scalar.
pub type HyperParams = hypernet::HyperParams<Real>;

/// Task identity registry specialized to the simulator scalar.
pub type TaskRegistry = hypernet::TaskRegistry<Real>;
