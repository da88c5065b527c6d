use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::net::{Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Std (m) of Gaussian noise added to every device coordinate of each
    /// training window, redrawn every step; 0 disables it.
    pub geometry_noise: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// 200 epochs, batch 64, cosine 1e-4 → 1e-6, weight decay 1e-5.
    pub fn full() -> Self {
        Self {
            lr_init: 1e-4,
            lr_final: 1e-6,
            epochs: 200,
            batch_size: 64,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            geometry_noise: 0.0,
            seed: 0,
        }
    }

    /// Short schedule for the small model; the larger initial rate compensates
    /// for the far fewer optimiser steps.
    pub fn desk() -> Self {
        Self {
            lr_init: 1e-3,
            lr_final: 1e-5,
            epochs: 30,
            batch_size: 16,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_init > 0.0
            && self.lr_final >= 0.0
            && self.lr_final <= self.lr_init
            && self.epochs >= 1
            && self.batch_size >= 1
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.geometry_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("invalid training config {self:?}")))
        }
    }
}

/// Cosine annealing from `lr_init` at step 0 to `lr_final` at step `total`.
pub fn cosine_lr(lr_init: f64, lr_final: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr_final;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (PI * t).cos())
}

/// Adam with decoupled weight decay over every tensor of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, config: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`; parameters without a gradient only decay.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.param(id).map(|t| t.data().to_vec());
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let w = p[k] as f64;
                let mut upd = self.weight_decay * w;
                if let Some(g) = &g {
                    let gk = g[k] as f64;
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                    upd += (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                } else {
                    m[k] *= self.beta1;
                    v[k] *= self.beta2;
                }
                p[k] = (w - lr * upd) as f32;
            }
        }
    }
}
