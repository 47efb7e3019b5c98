use super::graph::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

/// Named trainable tensors with on-demand gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            value,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.entries[id.0].grad.as_deref()
    }

    pub fn grad_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.entries[id.0].grad.as_deref_mut()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Vec<f64>) {
        assert_eq!(grad.len(), self.entries[id.0].value.numel(), "grad length");
        self.entries[id.0].grad = Some(grad);
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Adds the parameter gradients of a backward pass into the store.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            let entry = &mut self.entries[id.0];
            match &mut entry.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => entry.grad = Some(g.to_vec()),
            }
        }
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let sq: f64 = self
            .entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.entries.iter_mut().filter_map(|e| e.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// Named tensors in registration order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites values from `(name, tensor)` records; every stored name must be present
    /// with a matching shape.
    pub fn load_named(&mut self, records: &[(String, Tensor)]) -> Result<()> {
        for entry in &mut self.entries {
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::config(format!("snapshot lacks tensor '{}'", entry.name)))?;
            if t.shape() != entry.value.shape() {
                return Err(Error::Shape {
                    op: "load_named",
                    left: entry.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            entry.value = t.clone();
        }
        Ok(())
    }
}
