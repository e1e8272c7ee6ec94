use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// new best metric, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        PlateauScheduler {
            lr,
            factor: 0.5,
            patience: 20,
            min_lr: 1e-5,
            best: None,
            bad_epochs: 0,
        }
    }

    pub fn with_patience(mut self, patience: usize) -> Self {
        self.patience = patience;
        self
    }

    /// Records an epoch metric; returns the learning rate for the next epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if self.best.map_or(true, |b| metric < b) {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Exponential moving average of parameters, updated every `stride` calls to
/// `observe`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaShadow {
    pub decay: f64,
    pub stride: usize,
    pub shadow: Vec<f64>,
    calls: u64,
    pub updates: u64,
}

impl EmaShadow {
    pub fn new(init: &[f64], decay: f64, stride: usize) -> Self {
        EmaShadow {
            decay,
            stride: stride.max(1),
            shadow: init.to_vec(),
            calls: 0,
            updates: 0,
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &[f64]) {
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        self.updates += 1;
    }

    /// Counts one optimizer iteration and updates on every `stride`-th call.
    pub fn observe(&mut self, params: &[f64]) {
        self.calls += 1;
        if self.calls % self.stride as u64 == 0 {
            self.update(params);
        }
    }
}
