//! Language-model engine and compute-budgeted benchmark harness.

pub mod bench;
pub mod corpus;
pub mod eval;
pub mod graph;
pub mod models;
pub mod tokenizer;
pub mod training;
pub mod vocab_analysis;
pub mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use tensor::{Element, Tensor, TensorError};
