//! Named, ordered parameter collections.
//!
//! A [`ParamSet`] is the unit the tape differentiates, optimizers update,
//! and checkpoints serialize. Iteration order is insertion order, which
//! keeps every downstream artifact deterministic.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a named tensor; names must be unique within the set.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let slot = self.tensors.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(slot)
    }

    /// Number of tensors in the set.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count across all tensors.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn tensor(&self, slot: usize) -> &Tensor<F> {
        &self.tensors[slot]
    }

    pub fn tensor_mut(&mut self, slot: usize) -> &mut Tensor<F> {
        &mut self.tensors[slot]
    }

    /// Looks a tensor up by name.
    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    /// Iterates `(name, tensor)` pairs in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Adds `scale · delta[slot]` to every tensor. Shapes must align.
    pub fn add_scaled(&mut self, delta: &[Tensor<F>], scale: F) -> Result<()> {
        if delta.len() != self.tensors.len() {
            return Err(Error::shape(
                "add_scaled",
                format!("{} tensors vs {} deltas", self.tensors.len(), delta.len()),
            ));
        }
        for (t, d) in self.tensors.iter_mut().zip(delta) {
            if t.shape() != d.shape() {
                return Err(Error::shape(
                    "add_scaled",
                    format!("{:?} vs {:?}", t.shape(), d.shape()),
                ));
            }
            for (tv, &dv) in t.data_mut().iter_mut().zip(d.data()) {
                *tv += scale * dv;
            }
        }
        Ok(())
    }

    /// Elementwise squared distance to another set with identical layout.
    pub fn sq_dist(&self, other: &Self) -> Result<F> {
        let mut acc = F::zero();
        if self.len() != other.len() {
            return Err(Error::shape(
                "param sq_dist",
                format!("{} vs {} tensors", self.len(), other.len()),
            ));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            acc += a.sq_dist(b)?;
        }
        Ok(acc)
    }

    /// Errors if any tensor holds a non-finite value.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (name, t) in self.iter() {
            t.validate_finite(&format!("{context}: {name}"))?;
        }
        Ok(())
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients aligned slot-for-slot with the [`ParamSet`] they came from.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    by_slot: Vec<Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub(crate) fn new(by_slot: Vec<Tensor<F>>) -> Self {
        Gradients { by_slot }
    }

    /// Zero gradients shaped like the given set.
    pub fn zeros_like(set: &ParamSet<F>) -> Self {
        Gradients {
            by_slot: set.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.by_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }

    pub fn slot(&self, i: usize) -> &Tensor<F> {
        &self.by_slot[i]
    }

    pub fn slots(&self) -> &[Tensor<F>] {
        &self.by_slot
    }

    /// Sum of squared entries across every slot.
    pub fn sq_norm(&self) -> F {
        self.by_slot.iter().map(Tensor::sq_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.by_slot
            .iter()
            .all(|t| t.data().iter().all(|v| v.is_finite()))
    }
}

/// Squared L2 norm of a tensor list (used for parameter deltas).
pub fn delta_sq_norm<F: Scalar>(delta: &[Tensor<F>]) -> F {
    delta.iter().map(Tensor::sq_norm).sum()
}
