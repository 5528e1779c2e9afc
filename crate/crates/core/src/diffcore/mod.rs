//! Tensors, seeded randomness and reverse-mode differentiable primitives.

mod graph;
mod rng;
mod tensor;

pub use graph::{Activation, Gradients, Graph, Param, ParamId, ParamStore, Var};
pub use rng::{standard_normal, SeededRng};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::{axpy, dot};

#[cfg(test)]
mod tests;
