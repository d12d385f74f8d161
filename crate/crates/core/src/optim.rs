//! Adam and early stopping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Use the raw second moment `v` in the denominator instead of the
    /// bias-corrected `v̂`.
    pub uncorrected_v: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8, uncorrected_v: false }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.eps.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam over one [`ParamStore`]. Moments are kept in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    t: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let moments = params.iter().map(|(n, p)| (n.clone(), Moments { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })).collect();
        Self { config, t: 0, moments }
    }

    /// Number of steps taken.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    /// One update of every parameter that has a gradient. Gradients are
    /// validated before anything changes, so a rejected step leaves both
    /// parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        for (name, g) in grads.iter() {
            let Some(p) = params.get(name) else {
                return Err(Error::Config(format!("gradient for unknown parameter {name}")));
            };
            if p.numel() != g.len() || !self.moments.contains_key(name) {
                return Err(Error::Config(format!("gradient for {name} has {} values, parameter has {}", g.len(), p.numel())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, uncorrected_v } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = if uncorrected_v { 1.0 } else { 1.0 - beta2.powi(self.t as i32) };
        for (name, g) in grads.iter() {
            let Moments { m, v } = self.moments.get_mut(name).expect("checked above");
            let p = params.get_mut(name).expect("checked above");
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta = (*theta as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }
}

/// Validation-loss plateau detector.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    since_improvement: usize,
}

/// Outcome of [`EarlyStop::observe`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStop {
    pub const DEFAULT_PATIENCE: usize = 10;
    pub const DEFAULT_MIN_DELTA: f64 = 1e-4;

    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: None, since_improvement: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn since_improvement(&self) -> usize {
        self.since_improvement
    }

    /// An epoch improves when its loss is below `best − min_delta`; training
    /// should stop once `patience` epochs in a row have not improved.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        let improved = val_loss < self.best - self.min_delta;
        if improved {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        StopDecision { improved, stop: self.since_improvement >= self.patience }
    }
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self::new(Self::DEFAULT_PATIENCE, Self::DEFAULT_MIN_DELTA)
    }
}
