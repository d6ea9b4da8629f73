//! Adam with bias-corrected moments and decoupled weight decay.

use super::mlp::{Gradients, MlpDenoiser};
use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.005 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Adam { config, m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, model: &mut MlpDenoiser, grads: &Gradients) -> Result<(), ModelError> {
        let g = grads.flat();
        assert_eq!(g.len(), self.m.len(), "optimizer sized for a different model");
        if g.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteGradient { step: self.t + 1 });
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut i = 0;
        for p in model.params_mut() {
            let gi = g[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * gi;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
            i += 1;
        }
        model.steps += 1;
        Ok(())
    }
}
