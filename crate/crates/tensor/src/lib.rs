//! Dense double-precision tensors with a define-by-run tape for
//! reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Values are recorded as
//! nodes in creation order, which is already a topological order, so
//! [`Graph::backward`] walks the node list once in reverse.
//!
//! Trainable state lives outside the graph in a [`ParamStore`]; a graph pulls
//! parameters in as leaves with [`Graph::param`] and hands their gradients
//! back through [`Gradients::for_params`].

mod error;
mod gemm;
mod graph;
mod optim;
mod store;
mod tensor;

pub use error::{CheckpointError, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamState, AdamW};
pub use store::{read_records, write_records, ParamId, ParamStore};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, TensorError>;
