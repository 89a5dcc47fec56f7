//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operators append nodes,
//! [`Graph::backward`] sweeps them once in reverse, and
//! [`ParamStore::accumulate_grads`] moves the results onto parameters for
//! [`AdamW`] to consume.

pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use optim::{cosine_lr, AdamW, AdamWConfig, StepInfo};
pub use params::{ParamId, ParamStore, Parameter};
pub(crate) use params::hex;
pub use tensor::Tensor;
