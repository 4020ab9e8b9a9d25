//! Dense tensors, parameters, and reverse-mode differentiation of the 3D
//! building blocks.
//!
//! There is no batch axis: one [`Graph`] records one sample, and a batch is a
//! list of graphs whose losses are averaged when their gradients are
//! accumulated into the [`ParamStore`].

pub mod conv;
mod graph;
mod param;
mod real;
mod tensor;

pub use conv::{same_padding, Triple};
pub use graph::{Gradients, Graph, Var};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use real::{Precision, Real};
pub use tensor::Tensor;

pub(crate) use graph::softmax_into;
