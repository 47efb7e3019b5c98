use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `ids`. All of them must carry a gradient.
    pub fn step_ids(&mut self, store: &mut ParamStore, ids: &[ParamId]) -> Result<()> {
        if let Some(id) = ids.iter().find(|id| store.grad(**id).is_none()) {
            return Err(Error::usage(format!(
                "adam step: parameter '{}' has no gradient",
                store.name(*id)
            )));
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let AdamConfig { lr, betas: (b1, b2), eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for &id in ids {
            let g = store.grad(id).expect("checked above").to_vec();
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            if m.len() != g.len() {
                *m = vec![0.0; g.len()];
                *v = vec![0.0; g.len()];
            }
            let theta = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                theta[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Updates every parameter of the store.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step_ids(store, &ids)
    }

    /// Like [`Adam::step`], but parameters without a gradient are treated as having a zero one.
    pub fn step_lenient(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        for &id in &ids {
            if store.grad(id).is_none() {
                let n = store.get(id).numel();
                store.set_grad(id, vec![0.0; n]);
            }
        }
        self.step_ids(store, &ids)
    }
}
