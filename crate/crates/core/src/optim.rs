//! AdamW with decoupled weight decay, and a plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(lr: f64, config: AdamWConfig) -> Self {
        Self {
            config,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// One update. `params` and `grads` are matched by position and must
    /// keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("parameter list changed between steps".into()));
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *w -= self.lr * (update + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    /// Relative improvement needed to reset the patience counter.
    pub threshold: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 20,
            factor: 0.5,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

/// Multiplies the learning rate by `factor` once the tracked objective has
/// not improved for `patience` consecutive observations.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub config: PlateauConfig,
    best: f64,
    bad: usize,
}

impl Plateau {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records `value` and returns the learning rate to use next.
    pub fn observe(&mut self, value: f64, lr: f64) -> f64 {
        if !self.best.is_finite() || value < self.best - self.config.threshold * self.best.abs() {
            self.best = value;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad > self.config.patience {
            self.bad = 0;
            return (lr * self.config.factor).max(self.config.min_lr);
        }
        lr
    }
}
