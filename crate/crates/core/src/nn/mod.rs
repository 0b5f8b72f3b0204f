//! Minimal dense neural-network toolkit: matrices, a reverse-mode tape and
//! first-order optimizers.

mod graph;
mod matrix;
mod optim;

pub use graph::{sigmoid, Graph, Var, GATHER_ZERO};
pub use matrix::Matrix;
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
