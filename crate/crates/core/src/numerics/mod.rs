//! Dense tensors, reverse-mode differentiation and optimizer math.

mod graph;
mod kernels;
mod optim;
mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, AdamWState};
pub use tensor::Tensor;

