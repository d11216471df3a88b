//! First-order optimizers over [`ParamSet`]s.

use super::params::{Gradients, ParamSet};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters. `beta1`/`beta2` are the moment decay rates, not
/// loss coefficients.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
}

impl<F: Scalar> AdamConfig<F> {
    /// Standard decay rates with the given learning rate.
    pub fn with_lr(lr: F) -> Self {
        AdamConfig {
            lr,
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
        }
    }
}

/// Adam state: per-tensor first/second moments plus the step count.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    cfg: AdamConfig<F>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    step: u32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig<F>, set: &ParamSet<F>) -> Self {
        let zeros: Vec<Tensor<F>> = (0..set.len())
            .map(|i| Tensor::zeros(set.tensor(i).shape()))
            .collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig<F> {
        &self.cfg
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    /// Applies one bias-corrected Adam update in place.
    pub fn step(&mut self, set: &mut ParamSet<F>, grads: &Gradients<F>) -> Result<()> {
        if grads.len() != set.len() {
            return Err(Error::shape(
                "adam step",
                format!("{} grads vs {} params", grads.len(), set.len()),
            ));
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                step: self.step as usize,
                context: "non-finite gradient".to_string(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let one = F::one();
        let bias1 = one - self.cfg.beta1.powi(t);
        let bias2 = one - self.cfg.beta2.powi(t);
        for slot in 0..set.len() {
            let g = grads.slot(slot).data();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = set.tensor_mut(slot).data_mut();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (one - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (one - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug)]
pub struct Sgd<F> {
    pub lr: F,
}

impl<F: Scalar> Sgd<F> {
    pub fn step(&self, set: &mut ParamSet<F>, grads: &Gradients<F>) -> Result<()> {
        if grads.len() != set.len() {
            return Err(Error::shape(
                "sgd step",
                format!("{} grads vs {} params", grads.len(), set.len()),
            ));
        }
        for slot in 0..set.len() {
            let g = grads.slot(slot).data();
            let p = set.tensor_mut(slot).data_mut();
            for i in 0..g.len() {
                p[i] -= self.lr * g[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.push("p", Tensor::vector(vec![v])).unwrap();
        set
    }

    fn grad_of(g: f64) -> Gradients<f64> {
        Gradients::new(vec![Tensor::vector(vec![g])])
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut set = one_param(1.0);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &set);
        let grads = grad_of(0.5);
        adam.step(&mut set, &grads).unwrap();
        // First step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps) ≈ lr·sign(g).
        let expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((set.tensor(0).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_a_bitwise_noop() {
        let mut set = one_param(0.375);
        let before = set.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &set);
        let grads = grad_of(2.0);
        adam.step(&mut set, &grads).unwrap();
        assert_eq!(set, before);
    }

    #[test]
    fn zero_gradient_is_a_bitwise_noop() {
        let mut set = one_param(-0.25);
        let before = set.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &set);
        let grads = Gradients::zeros_like(&set);
        adam.step(&mut set, &grads).unwrap();
        assert_eq!(set, before);
    }

    #[test]
    fn sgd_step_is_minus_lr_times_gradient() {
        let mut set = one_param(2.0);
        let grads = grad_of(3.0);
        Sgd { lr: 0.1 }.step(&mut set, &grads).unwrap();
        assert!((set.tensor(0).data()[0] - 1.7).abs() < 1e-15);
    }
}
