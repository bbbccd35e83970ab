//! Minimal reverse-mode differentiation in double precision.
//!
//! A [`Graph`] records every primitive applied to its nodes; values are
//! computed eagerly, and [`Graph::backward`] walks the record in reverse.
//! Trainable tensors live in [`Params`] and are bound to graph leaves with
//! [`Graph::param`] so gradients can be accumulated back with
//! [`Graph::accumulate`].

mod checkpoint;
mod gradcheck;
mod graph;
mod kernels;
mod linalg;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_STEP};
pub use graph::{Gradients, Graph, Var};
pub use kernels::ChunkGeometry;
pub use tensor::{ParamId, Params, Tensor};


