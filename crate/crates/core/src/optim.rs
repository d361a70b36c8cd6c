//! Optimizers, the step learning-rate schedule, and gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::Grads;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Named gradients detached from the tape.
pub type GradMap = BTreeMap<String, Tensor>;

pub fn collect_grads(grads: &Grads) -> GradMap {
    grads
        .params()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

/// `base * 0.95^floor(epoch / 5)`.
pub fn lr_schedule(epoch: u64, base: f64) -> f64 {
    base * 0.95f64.powi((epoch / 5) as i32)
}

pub fn global_norm(grads: &GradMap) -> f64 {
    grads.values().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    /// Updates every parameter in `grads` accepted by `select`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradMap,
        lr: f64,
        select: impl Fn(&str) -> bool,
    ) {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (name, g) in grads.iter().filter(|(n, _)| select(n)) {
            let Some(p) = store.params.get_mut(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradMap,
        lr: f64,
        select: impl Fn(&str) -> bool,
    ) {
        for (name, g) in grads.iter().filter(|(n, _)| select(n)) {
            let Some(p) = store.params.get_mut(name) else { continue };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((w, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= lr * *vi;
            }
        }
    }
}
