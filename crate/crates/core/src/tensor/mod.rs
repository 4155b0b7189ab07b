//! Dense tensors and the reverse-mode differentiation engine.

pub mod dense;
pub mod gradcheck;
pub mod graph;
pub mod kl;

pub use dense::Tensor;
pub use gradcheck::finite_diff_check;
pub use graph::{Bindings, Gradients, Graph, NodeId, Values, PROB_FLOOR};
pub use kl::{kl_divergence, kl_graph, Distribution};
