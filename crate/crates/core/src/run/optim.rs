//! Adam and learning-rate schedules.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const PLATEAU_FACTOR: f64 = 0.5;
pub const PLATEAU_PATIENCE: usize = 5;
pub const PLATEAU_FLOOR: f64 = 1e-6;

/// Adam moments for every parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Adam {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Whether the moment buffers line up with `store`.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(p, (m, v))| m.len() == p.value.numel() && v.len() == p.value.numel())
    }

    /// One bias-corrected update from the accumulated gradients in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !self.matches(store) {
            return Err(Error::Config("optimizer state does not match the parameter set".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (p, (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            if !p.requires_grad {
                continue;
            }
            let grad = p.grad.data().to_vec();
            for (((w, g), mi), vi) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Half-cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * t).cos())
}

/// Reduce-on-plateau: halves the rate after `PLATEAU_PATIENCE` evaluations
/// without improvement, never below `PLATEAU_FLOOR`.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    best: f64,
    stale: usize,
}

impl Plateau {
    pub fn new(base: f64) -> Self {
        Plateau {
            lr: base,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > PLATEAU_PATIENCE {
                self.lr = (self.lr * PLATEAU_FACTOR).max(PLATEAU_FLOOR);
                self.stale = 0;
            }
        }
        self.lr
    }
}
