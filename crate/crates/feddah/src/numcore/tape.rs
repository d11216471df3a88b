//! Reverse-mode automatic differentiation on a replayable op tape.
//!
//! Recording is eager: every op computes its value as it is pushed, so a
//! tape doubles as a forward evaluator. [`Tape::backward`] replays the ops
//! in reverse, accumulating vector-Jacobian products into every parameter
//! registered from a [`ParamSet`].

use super::params::{Gradients, ParamSet};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    /// Leaf bound to a slot of the registered parameter set.
    Param { slot: usize },
    /// Leaf treated as a constant; no gradient is reported for it.
    Const,
    /// `w · x` for rank-2 `w` and rank-1 `x`.
    MatVec { w: NodeId, x: NodeId },
    /// Elementwise sum of two same-shape nodes.
    Add { a: NodeId, b: NodeId },
    /// Elementwise product with a fixed scalar.
    Scale { x: NodeId, c: f64 },
    /// Concatenation of rank-1 nodes.
    Concat { parts: Vec<NodeId> },
    /// Elementwise hyperbolic tangent.
    Tanh { x: NodeId },
    /// Scalar sum of squared differences between two same-shape nodes.
    SqDiffSum { x: NodeId, target: NodeId },
    /// Scalar cross-entropy of softmax(logits) against a class index.
    SoftmaxCe { logits: NodeId, class: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    /// True when some parameter can be reached through this node.
    tracked: bool,
}

/// Wengert list: eager values plus enough structure to replay backwards.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_count: Option<usize>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_count: None,
        }
    }

    /// Registers every tensor of `set` as a differentiable leaf.
    ///
    /// Returns node handles aligned with the set's slots. A tape tracks at
    /// most one parameter set; shifted or perturbed views of the same
    /// parameters should be built on top of these leaves with [`Tape::add`].
    pub fn params(&mut self, set: &ParamSet<F>) -> Result<Vec<NodeId>> {
        if self.param_count.is_some() {
            return Err(Error::Config(
                "tape already holds a parameter set".to_string(),
            ));
        }
        self.param_count = Some(set.len());
        Ok((0..set.len())
            .map(|slot| {
                self.push(Node {
                    value: set.tensor(slot).clone(),
                    op: Op::Param { slot },
                    tracked: true,
                })
            })
            .collect())
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Node {
            value,
            op: Op::Const,
            tracked: false,
        })
    }

    /// Value computed for a node.
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    /// Value of a length-1 node as a plain scalar.
    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, node: Node<F>) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    // ─── op recording ────────────────────────────────────────────────────

    /// `w · x` (matrix times vector).
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let value = self.value(w).matvec(self.value(x))?;
        let tracked = self.tracked(w) || self.tracked(x);
        Ok(self.push(Node {
            value,
            op: Op::MatVec { w, x },
            tracked,
        }))
    }

    /// Elementwise `a + b`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Node {
            value,
            op: Op::Add { a, b },
            tracked,
        }))
    }

    /// `w · x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Elementwise `c · x` for a fixed (non-differentiated) coefficient.
    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let value = self.value(x).scale(c);
        let tracked = self.tracked(x);
        self.push(Node {
            value,
            op: Op::Scale {
                x,
                c: c.to_f64().expect("scale coefficient is finite"),
            },
            tracked,
        })
    }

    /// Concatenation of rank-1 nodes, in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 1 {
                return Err(Error::shape("concat", format!("rank {} part", v.rank())));
            }
            data.extend_from_slice(v.data());
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Node {
            value: Tensor::vector(data),
            op: Op::Concat {
                parts: parts.to_vec(),
            },
            tracked,
        }))
    }

    /// Elementwise tanh.
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        let tracked = self.tracked(x);
        self.push(Node {
            value,
            op: Op::Tanh { x },
            tracked,
        })
    }

    /// Scalar node `Σ (x_i − target_i)²`.
    pub fn sq_diff_sum(&mut self, x: NodeId, target: NodeId) -> Result<NodeId> {
        let value = self.value(x).sq_dist(self.value(target))?;
        let tracked = self.tracked(x) || self.tracked(target);
        Ok(self.push(Node {
            value: Tensor::vector(vec![value]),
            op: Op::SqDiffSum { x, target },
            tracked,
        }))
    }

    /// Scalar node `−log softmax(logits)[class]`, computed stably.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, class: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rank() != 1 || class >= v.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, class {class}", v.shape()),
            ));
        }
        let max = v.data().iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = max
            + v.data()
                .iter()
                .map(|&l| (l - max).exp())
                .sum::<F>()
                .ln();
        let loss = lse - v.data()[class];
        let tracked = self.tracked(logits);
        Ok(self.push(Node {
            value: Tensor::vector(vec![loss]),
            op: Op::SoftmaxCe { logits, class },
            tracked,
        }))
    }

    // ─── reverse pass ────────────────────────────────────────────────────

    /// Replays the tape in reverse from a scalar loss node.
    ///
    /// Returns gradients aligned with the registered parameter set; slots
    /// the loss never touches come back as exact zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>> {
        let param_count = self
            .param_count
            .ok_or_else(|| Error::Config("backward on a tape with no parameters".to_string()))?;
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", loss_value.shape()),
            ));
        }
        if !loss_value.data()[0].is_finite() {
            return Err(Error::NonFinite {
                context: "loss value before backward".to_string(),
            });
        }

        let mut adjoint: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![F::one()]);

        let mut param_grads: Vec<Option<Tensor<F>>> = vec![None; param_count];

        for id in (0..=loss.0).rev() {
            let Some(grad) = adjoint[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param { slot } => {
                    let t = Tensor::from_vec(node.value.shape(), grad)?;
                    param_grads[*slot] = Some(match param_grads[*slot].take() {
                        Some(existing) => existing.add(&t)?,
                        None => t,
                    });
                }
                Op::MatVec { w, x } => {
                    let wv = &self.nodes[w.0].value;
                    let xv = &self.nodes[x.0].value;
                    if self.tracked(*w) {
                        // d(w·x)/dw contributes grad ⊗ x, row by row.
                        let acc = self.adjoint_buf(&mut adjoint, *w);
                        let n = xv.len();
                        for (r, &g) in grad.iter().enumerate() {
                            let row = &mut acc[r * n..(r + 1) * n];
                            for (slot, &xj) in row.iter_mut().zip(xv.data()) {
                                *slot += g * xj;
                            }
                        }
                    }
                    if self.tracked(*x) {
                        // d(w·x)/dx contributes wᵀ · grad.
                        let acc = self.adjoint_buf(&mut adjoint, *x);
                        for (r, &g) in grad.iter().enumerate() {
                            for (slot, &wj) in acc.iter_mut().zip(wv.row(r)) {
                                *slot += g * wj;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &input in [a, b].iter() {
                        if self.tracked(*input) {
                            let acc = self.adjoint_buf(&mut adjoint, *input);
                            for (slot, &g) in acc.iter_mut().zip(&grad) {
                                *slot += g;
                            }
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.tracked(*x) {
                        let c = F::of(*c);
                        let acc = self.adjoint_buf(&mut adjoint, *x);
                        for (slot, &g) in acc.iter_mut().zip(&grad) {
                            *slot += c * g;
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        if self.tracked(p) {
                            let acc = self.adjoint_buf(&mut adjoint, p);
                            for (slot, &g) in acc.iter_mut().zip(&grad[offset..offset + len]) {
                                *slot += g;
                            }
                        }
                        offset += len;
                    }
                }
                Op::Tanh { x } => {
                    if self.tracked(*x) {
                        let y = self.nodes[id].value.data();
                        let acc = self.adjoint_buf(&mut adjoint, *x);
                        for ((slot, &g), &yi) in acc.iter_mut().zip(&grad).zip(y) {
                            *slot += g * (F::one() - yi * yi);
                        }
                    }
                }
                Op::SqDiffSum { x, target } => {
                    let g = grad[0];
                    let two = F::of(2.0);
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let tv = self.nodes[target.0].value.data().to_vec();
                    if self.tracked(*x) {
                        let acc = self.adjoint_buf(&mut adjoint, *x);
                        for ((slot, &a), &t) in acc.iter_mut().zip(&xv).zip(&tv) {
                            *slot += two * (a - t) * g;
                        }
                    }
                    if self.tracked(*target) {
                        let acc = self.adjoint_buf(&mut adjoint, *target);
                        for ((slot, &a), &t) in acc.iter_mut().zip(&xv).zip(&tv) {
                            *slot += -two * (a - t) * g;
                        }
                    }
                }
                Op::SoftmaxCe { logits, class } => {
                    if self.tracked(*logits) {
                        let g = grad[0];
                        let lv = self.nodes[logits.0].value.data().to_vec();
                        let max = lv.iter().cloned().fold(F::neg_infinity(), F::max);
                        let denom: F = lv.iter().map(|&l| (l - max).exp()).sum();
                        let acc = self.adjoint_buf(&mut adjoint, *logits);
                        for (i, (slot, &l)) in acc.iter_mut().zip(&lv).enumerate() {
                            let p = (l - max).exp() / denom;
                            let indicator = if i == *class { F::one() } else { F::zero() };
                            *slot += (p - indicator) * g;
                        }
                    }
                }
            }
        }

        let grads = param_grads
            .into_iter()
            .enumerate()
            .map(|(slot, g)| {
                g.unwrap_or_else(|| {
                    // Find the param node to size the zero tensor.
                    let shape = self
                        .nodes
                        .iter()
                        .find_map(|n| match n.op {
                            Op::Param { slot: s } if s == slot => Some(n.value.shape()),
                            _ => None,
                        })
                        .expect("registered parameter has a node");
                    Tensor::zeros(shape)
                })
            })
            .collect();
        Ok(Gradients::new(grads))
    }

    /// Borrows (allocating on first touch) the adjoint buffer of a node.
    fn adjoint_buf<'a>(
        &self,
        adjoint: &'a mut [Option<Vec<F>>],
        id: NodeId,
    ) -> &'a mut Vec<F> {
        adjoint[id.0].get_or_insert_with(|| vec![F::zero(); self.nodes[id.0].value.len()])
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Loss (w·x − t)² with w=[[3]], x=[2], t=[5]: d/dw = 2(wx−t)·x = 2·1·2 = 4.
    #[test]
    fn single_affine_square_matches_hand_derivative() {
        let mut set = ParamSet::new();
        set.push("w", Tensor::matrix(1, 1, vec![3.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.params(&set).unwrap();
        let x = tape.constant(Tensor::vector(vec![2.0]));
        let t = tape.constant(Tensor::vector(vec![5.0]));
        let y = tape.matvec(nodes[0], x).unwrap();
        let loss = tape.sq_diff_sum(y, t).unwrap();
        assert_eq!(tape.scalar_value(loss), 1.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.slot(0).data(), &[4.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero_gradient() {
        let mut set = ParamSet::new();
        set.push("used", Tensor::vector(vec![1.0, 2.0])).unwrap();
        set.push("unused", Tensor::vector(vec![7.0])).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.params(&set).unwrap();
        let t = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let loss = tape.sq_diff_sum(nodes[0], t).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.slot(0).data(), &[2.0, 4.0]);
        assert_eq!(grads.slot(1).data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut set = ParamSet::new();
        set.push("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.params(&set).unwrap();
        assert!(tape.backward(nodes[0]).is_err());
    }

    #[test]
    fn registering_two_parameter_sets_is_an_error() {
        let mut set = ParamSet::<f64>::new();
        set.push("w", Tensor::vector(vec![1.0])).unwrap();
        let mut tape = Tape::new();
        tape.params(&set).unwrap();
        assert!(tape.params(&set).is_err());
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut set = ParamSet::new();
        set.push("logits", Tensor::vector(vec![0.2, -0.4])).unwrap();
        let mut tape = Tape::new();
        let nodes = tape.params(&set).unwrap();
        let loss = tape.softmax_cross_entropy(nodes[0], 0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let z0: f64 = 0.2;
        let z1: f64 = -0.4;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let g = grads.slot(0).data();
        assert!((g[0] - (p0 - 1.0)).abs() < 1e-12);
        assert!((g[1] - (1.0 - p0)).abs() < 1e-12);
    }
}
