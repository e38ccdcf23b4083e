//! Decoupled-weight-decay Adam.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moments and step counts.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<R: Real> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub steps: Vec<u64>,
}

impl<R: Real> AdamW<R> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<R>) -> Self {
        let m: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, v: m.clone(), m, steps: alloc::vec![0; store.len()] }
    }

    /// Updates every trainable parameter that received a gradient, then clears gradients.
    ///
    /// Parameters without a gradient in this window are left untouched, including
    /// weight decay, so one task's step never moves another task's head.
    pub fn step(&mut self, store: &mut ParamStore<R>) {
        let c = self.cfg;
        let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
        let (one_b1, one_b2) = (R::of(1.0 - c.beta1), R::of(1.0 - c.beta2));
        let decay = R::of(1.0 - c.lr * c.weight_decay);
        let eps = R::of(c.eps);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen || !p.touched {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
            let step_size = R::of(c.lr / bc1);
            let bc2_sqrt = R::of(libm::sqrt(bc2));
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w -= step_size * *m / denom;
            }
        }
        store.zero_grads();
    }
}
