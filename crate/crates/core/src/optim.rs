//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::params::{ParamStore, StoreId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Moment estimates of one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Indexed by store, then by parameter position; created lazily.
    pub slots: BTreeMap<StoreId, Vec<Option<Slot>>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, slots: BTreeMap::new() }
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    /// Parameters without a gradient keep their value and moments.
    pub fn step(&mut self, id: StoreId, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let cfg = self.cfg;
        let slots = self.slots.entry(id).or_default();
        slots.resize(store.len(), None);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(id, crate::params::ParamId(i)) else { continue };
            let slot = slots[i].get_or_insert_with(|| Slot {
                m: Array2::zeros(g.dim()),
                v: Array2::zeros(g.dim()),
                count: 0,
            });
            slot.count += 1;
            slot.m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            slot.v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let c1 = 1.0 - cfg.beta1.powi(slot.count as i32);
            let c2 = 1.0 - cfg.beta2.powi(slot.count as i32);
            if entry.decay && cfg.weight_decay != 0.0 {
                entry.value.mapv_inplace(|w| w - lr * cfg.weight_decay * w);
            }
            ndarray::Zip::from(&mut entry.value).and(&slot.m).and(&slot.v).for_each(|w, &m, &v| {
                *w -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            });
        }
    }
}
