//! Dense row-major tensors and a reverse-mode tape.
//!
//! Every operation the model needs is a node kind on [`Graph`] with a
//! hand-derived backward rule. Batched attention is expressed with
//! block-diagonal ops so that a whole episode runs through a handful of
//! large matrix products instead of one graph per sample.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{compare_gradients, grad_check, GradCheckOptions};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
