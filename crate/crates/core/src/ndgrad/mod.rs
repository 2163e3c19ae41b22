//! Dense array math with reverse-mode automatic differentiation.

mod array;
mod fdcheck;
mod graph;

pub use array::Array;
pub use fdcheck::finite_difference_check;
pub use graph::{Bindings, Evaluation, Graph, NodeId, Reduce};
