use std::collections::BTreeMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T: Element = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, moments: BTreeMap::new() }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>) -> Self {
        Adam { config, step, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Tensor<T>, Tensor<T>)> {
        &self.moments
    }

    /// Applies one update using `lr` in place of the configured rate (for schedules).
    ///
    /// Every gradient is validated before any parameter is touched, so a
    /// rejected step leaves parameters and state unchanged.
    pub fn step_with_lr(&mut self, lr: f64, params: &mut [(&str, &mut Tensor<T>, &Tensor<T>)]) -> Result<()> {
        if !(lr > 0.0) {
            return Err(TensorError::Optimizer(format!("learning rate must be positive, got {lr}")));
        }
        for (name, p, g) in params.iter() {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(name.to_string()));
            }
            if let Some((m, _)) = self.moments.get(*name) {
                if m.shape() != p.shape() {
                    return Err(TensorError::Optimizer(format!("moment shape mismatch for `{name}`")));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(c.eps));

        for (name, p, g) in params.iter_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())));
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &grad), (mi, vi)) in iter {
                *mi = b1 * *mi + one_b1 * grad;
                *vi = b2 * *vi + one_b2 * grad * grad;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [(&str, &mut Tensor<T>, &Tensor<T>)]) -> Result<()> {
        self.step_with_lr(self.config.lr, params)
    }
}
