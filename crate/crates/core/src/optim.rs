//! Adam with linear learning-rate warmup and optional global-norm clipping.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::params::{Grads, ParamStore};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 4e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 1000, clip_norm: None }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |p: &crate::params::ParamTensor<T>| alloc::vec![T::zero(); p.data.len()];
        Self { config, m: store.iter().map(zeros).collect(), v: store.iter().map(zeros).collect(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.lr
        } else {
            c.lr * ((self.t + 1) as f64 / c.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        let c = self.config;
        let lr = self.current_lr();
        self.t += 1;
        let clip = match c.clip_norm {
            Some(max) => {
                let n = grads.global_norm().f64();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - libm::pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.t as f64);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let step = T::c(lr / bc1);
        let eps = T::c(c.eps);
        let clip = T::c(clip);
        let inv_bc2 = T::c(1.0 / bc2);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = grads.slots[i].as_ref() else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p.data[j] -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
