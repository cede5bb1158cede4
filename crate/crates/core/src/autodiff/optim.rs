//! AdamW with linearly decaying learning rate.

use crate::error::{check_len, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.002,
            final_lr: 0.0005,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate at a fraction `f ∈ [0, 1]` of training.
    pub fn lr_at(&self, fraction: f64) -> f64 {
        let f = fraction.clamp(0.0, 1.0);
        self.cfg.base_lr + f * (self.cfg.final_lr - self.cfg.base_lr)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], fraction: f64) -> Result<()> {
        check_len("optimizer parameters", self.m.len(), params.len())?;
        check_len("optimizer gradients", self.m.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient at parameter {i} (value {}) on step {}",
                grads[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let lr = self.lr_at(fraction);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * c.weight_decay * params[i];
            params[i] -= lr * mhat / (vhat.sqrt() + c.epsilon);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Training(format!(
                "parameters became non-finite on step {}",
                self.step
            )));
        }
        Ok(())
    }
}
