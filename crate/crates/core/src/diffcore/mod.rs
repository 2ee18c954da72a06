//! Minimal reverse-mode tensor engine: exactly the primitives the loss
//! pipelines need, plus a finite-difference oracle to check them against.

pub mod gradcheck;
pub mod graph;
pub mod graph64;
pub mod kernels;
pub mod tensor;

pub use gradcheck::{finite_difference_grad, max_rel_err};
pub use graph::{Gradients, Graph, GraphOps, NodeId, Op};
pub use graph64::{Graph64, NodeId64};
pub use tensor::{CountingReader, Tensor};
