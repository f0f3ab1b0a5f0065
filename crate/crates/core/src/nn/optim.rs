use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use super::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adam with bias correction and optional global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    frozen: Vec<bool>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| Mat::zeros(t.raw_dim()))
                .collect()
        };
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            frozen: vec![false; params.len()],
        }
    }

    /// Excludes `id` from updates.
    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.index()] = true;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.index()]
    }

    /// Applies one update; returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut ParamStore, grads: &mut Gradients) -> f64 {
        for id in params.ids() {
            if self.frozen[id.index()] {
                grads.get_mut(id).fill(0.0);
            }
        }
        let norm = grads.global_norm();
        if let Some(clip) = self.config.clip_norm {
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if self.frozen[id.index()] {
                continue;
            }
            let i = id.index();
            let g = grads.get(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= learning_rate * mhat / (vhat.sqrt() + eps);
                });
        }
        norm
    }
}
