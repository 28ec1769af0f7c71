//! Reverse-mode autodiff on a flat op graph.
//!
//! A [`Graph`] owns an append-only list of nodes; insertion order is the
//! topological order. Forward values are computed eagerly as ops are
//! recorded, `backward` replays the list in reverse. All math is f64.
//!
//! Second-order support is deliberately narrow: the critic's input
//! gradient is itself built out of first-class ops (`matmul_tb`,
//! `prelu_deriv`, `broadcast_row`), so the gradient-penalty term can be
//! differentiated by the ordinary first-order machinery.

mod adam;
mod check;
mod graph;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamSlot};
pub use check::{gradient_check, GradCheck};
pub use graph::{BnBatchStats, Gradients, Graph, NodeId, ProjCam};
pub use tensor::Tensor;
