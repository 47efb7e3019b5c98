//! Minimal reverse-mode differentiable numeric core.

pub mod gradcheck;
mod graph;
mod optim;
mod params;
pub mod snapshot;
mod tensor;

pub use graph::{gelu, log_sigmoid, sigmoid, Gradients, Graph, Var};
pub(crate) use graph::softmax_in_place;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
