use std::collections::BTreeMap;

use crate::tensor::{Matrix, ParamId, ParamMask, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moment buffers exist only for the
/// parameters in the mask given at construction.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    slots: BTreeMap<ParamId, (Matrix, Matrix)>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore, trainable: &ParamMask) -> Self {
        let slots = trainable
            .ids()
            .map(|id| {
                let d = store.get(id).dim();
                (id, (Matrix::zeros(d), Matrix::zeros(d)))
            })
            .collect();
        Self { cfg, slots, t: 0 }
    }

    /// Parameters holding optimizer state.
    pub fn slot_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.slots.keys().copied()
    }

    /// One update. Gradients for parameters without a slot are ignored;
    /// updated values are rounded to `f32` precision.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads {
            let Some((m, v)) = self.slots.get_mut(id) else {
                continue;
            };
            let p = store.get_mut(*id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p = (*p * (1.0 - lr * c.weight_decay) - lr * update) as f32 as f64;
                });
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
