//! Dense `f64` arrays and a recording graph for reverse-mode differentiation.
//!
//! Reductions accumulate left to right in flat index order, so identical
//! inputs always give bit-identical outputs.

mod array;
mod graph;

pub use array::{broadcast_shape, Array};
pub use graph::{sigmoid, softplus, Graph, Tensor};
