use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Real = f64> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Ok(AdamState { config, step: 0, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one bias-corrected update in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>], grads: &[&Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} moments, {} params, {} grads", self.m.len(), params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam",
                    format!("parameter {i}: param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), self.m[i].shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = F::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64_lossy(1.0 - c.beta2.powi(t));
        let (b1, b2) = (F::from_f64_lossy(c.beta1), F::from_f64_lossy(c.beta2));
        let (lr, eps) = (F::from_f64_lossy(c.lr), F::from_f64_lossy(c.eps));
        let one = F::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((theta, &gi), (mi, vi)) in it {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
