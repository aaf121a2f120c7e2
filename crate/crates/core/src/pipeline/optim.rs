use std::collections::BTreeMap;

use crate::diff::Tensor;
use crate::error::{contract, Result};
use crate::gcn::ParamStore;

/// Adaptive-moment optimizer over a named subset of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                return contract("adam", format!("no parameter `{name}`"));
            };
            if p.shape() != g.shape() {
                return contract("adam", format!("gradient {:?} for `{name}` of shape {:?}", g.shape(), p.shape()));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moments and step count as named tensors under `prefix`.
    pub fn save(&self, prefix: &str, store: &mut ParamStore) {
        store.insert(format!("{prefix}.t"), Tensor::scalar(self.t as f64));
        for (k, m) in &self.m {
            store.insert(format!("{prefix}.m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            store.insert(format!("{prefix}.v.{k}"), v.clone());
        }
    }

    /// Restores the state written by [`Adam::save`]; hyperparameters are kept.
    pub fn load(&mut self, prefix: &str, store: &ParamStore) {
        self.t = store.get(&format!("{prefix}.t")).map_or(0, |t| t.item() as u64);
        let (mp, vp) = (format!("{prefix}.m."), format!("{prefix}.v."));
        self.m.clear();
        self.v.clear();
        for (k, val) in store.iter() {
            if let Some(name) = k.strip_prefix(&mp) {
                self.m.insert(name.to_string(), val.clone());
            } else if let Some(name) = k.strip_prefix(&vp) {
                self.v.insert(name.to_string(), val.clone());
            }
        }
    }
}
