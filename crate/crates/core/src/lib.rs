//! Split CNN inference between a client and a server.
//!
//! The model graph is cut after a single node; the client runs the prefix,
//! packs the tensors that cross the cut and ships them to the server, which
//! resumes execution and returns the logits. A profiler keeps a cost model
//! per ⟨split, bitwidth⟩ configuration and a scheduler picks the
//! configuration that best satisfies prioritized hard constraints and soft
//! targets.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod graph;
pub mod ispm;
pub mod model;
pub mod profiler;
pub mod reference;
pub mod runtime;
pub mod scheduler;
pub mod sweep;
pub mod tensor;

pub use engine::{execute, forward_logits, ExecPlan, Execution};
pub use graph::{DepGraph, NodeId, Op, SplitPoint};
pub use model::{Model, Weights};
pub use tensor::Tensor;
