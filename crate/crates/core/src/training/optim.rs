use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
        }
    }
}

/// Adam with bias correction. Parameters without a gradient in a step are
/// left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>, u64)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            moments: HashMap::new(),
        }
    }

    /// Applies one update at learning rate `lr`; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<f64> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "adam gradient" });
        }
        let scale = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let (m, v, t) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()], 0));
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

/// Sums parameter gradients over several graphs.
#[derive(Default)]
pub struct GradAccum {
    sums: HashMap<ParamId, Tensor>,
}

impl GradAccum {
    pub fn add(&mut self, grads: Vec<(ParamId, Tensor)>, scale: f64) {
        for (id, g) in grads {
            match self.sums.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    let mut g = g;
                    if scale != 1.0 {
                        g.data_mut().iter_mut().for_each(|v| *v *= scale);
                    }
                    self.sums.insert(id, g);
                }
            }
        }
    }

    pub fn into_vec(self) -> Vec<(ParamId, Tensor)> {
        let mut v: Vec<_> = self.sums.into_iter().collect();
        v.sort_by_key(|(id, _)| *id);
        v
    }
}
