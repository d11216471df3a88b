//! Numeric core: tensors, reverse-mode differentiation, optimizers, and a
//! finite-difference gradient checker.
//!
//! Everything here is generic over the [`Scalar`] type; the rest of the
//! crate instantiates it at `f64` via the aliases at the crate root.

mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck};
pub use optim::{Adam, AdamConfig, Sgd};
pub use params::{delta_sq_norm, Gradients, ParamSet};
pub use scalar::Scalar;
pub use tape::{NodeId, Tape};
pub use tensor::{dot, linear_forward, Tensor};
