//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors.
//!
//! The engine is a tape: every operation appends a node to a [`Graph`] and
//! [`Graph::backward`] walks the tape in reverse. Tensors are row-major and
//! image tensors use the NCHW layout. Shape mismatches inside the graph are
//! programming errors and panic; callers validate user input before building
//! a graph.

mod conv;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{clip_global_norm, global_norm, Adam, AdamConfig};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
