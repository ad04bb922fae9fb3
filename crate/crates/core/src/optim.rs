//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Grads, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    /// Indexed by parameter; `None` until the parameter first trains.
    pub moments: Vec<Option<Moments<F>>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            t: 0,
            moments: vec![None; n_params],
        }
    }

    /// Applies one update. Frozen parameters, and parameters without a
    /// gradient entry (unused by every example of the batch), are not
    /// touched at all.
    /// Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>, lr: f64) -> f64 {
        let norm = grads.global_norm();
        let clip = match self.config.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let (b1, b2) = (F::from_f64(c.beta1), F::from_f64(c.beta2));
        let (one_b1, one_b2) = (F::from_f64(1.0 - c.beta1), F::from_f64(1.0 - c.beta2));
        let clip = F::from_f64(clip);
        let step_size = F::from_f64(lr / bc1);
        let bc2_sqrt = F::from_f64(libm::sqrt(bc2));
        let eps = F::from_f64(c.eps);
        let decay = F::from_f64(1.0 - lr * c.weight_decay);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, p) in store.iter_mut() {
            let Some(g) = grads.get(id) else {
                continue;
            };
            if p.frozen {
                continue;
            }
            let numel = p.tensor.numel();
            let mom = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![F::ZERO; numel],
                v: vec![F::ZERO; numel],
            });
            let data = p.tensor.data_mut();
            if p.decay && c.weight_decay != 0.0 {
                data.iter_mut().for_each(|w| *w *= decay);
            }
            for i in 0..numel {
                let gi = g[i] * clip;
                mom.m[i] = b1 * mom.m[i] + one_b1 * gi;
                mom.v[i] = b2 * mom.v[i] + one_b2 * gi * gi;
                let denom = mom.v[i].sqrt() / bc2_sqrt + eps;
                data[i] -= step_size * mom.m[i] / denom;
            }
        }
        norm
    }
}

/// Linear warmup from zero to `peak`, then cosine decay to
/// `final_ratio * peak` at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub final_ratio: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64, total: u64) -> Self {
        Self {
            peak,
            warmup,
            total,
            final_ratio: 0.1,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let floor = self.final_ratio * self.peak;
        floor + (self.peak - floor) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}
