//! Minimal CPU tensor engine: NCHW `f32` tensors, a reverse-mode tape and
//! the layer kernels used by the loss network, the transformation network
//! and the classifiers.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{reflect_index, PadMode};
pub use optim::{AdamState, Optimizer, OptimizerKind};
pub use params::{he_normal, BlobError, ParamId, ParamSpec, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
