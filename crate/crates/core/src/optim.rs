//! Adam over any name-visitable parameter set, with an optional gradient
//! mask so fine-tuning can restrict which tensors move.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// Anything exposing named parameter slices (weights or their gradients).
pub trait ParamVisit {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

impl ParamVisit for crate::unet::UNetParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.for_each_param(&mut |n, s| f(n, s));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.for_each_param_mut(&mut |n, s| f(n, s));
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One Adam update. `mask(name)` decides whether a tensor is trainable;
    /// untouched tensors keep no state.
    pub fn update<P: ParamVisit>(
        &mut self,
        params: &mut P,
        grads: &P,
        cfg: &AdamConfig,
        mask: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        let mut gmap: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        grads.visit(&mut |name, s| {
            if mask(name) {
                gmap.insert(name.to_string(), s.to_vec());
            }
        });
        params.visit_mut(&mut |name, p| {
            let Some(g) = gmap.get(name) else { return };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        });
    }
}
