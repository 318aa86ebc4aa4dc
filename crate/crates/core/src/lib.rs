//! Nested anytime subnets with full computation reuse.
//!
//! A single expanded network is carved into subnets `1..=N`, each contained
//! in the next. Units (filters or neurons) of a larger subnet never feed a
//! smaller one, so a prediction started in subnet `j` can be refined to
//! subnet `k > j` by evaluating only the new units, and fall back to any
//! smaller subnet for free.
//!
//! - [`tensor`]: deterministic f32 kernels and the counter-based RNG.
//! - [`netgraph`]: architecture, unit levels, synapse rule, MAC accounting.
//! - [`engine`]: masked forward/backward, importance gradients, suppressed SGD.
//! - [`construct`]: the unit-movement construction loop.
//! - [`distill`]: knowledge-distillation retraining.
//! - [`anytime`]: incremental inference sessions.
//! - [`data`]: IDX and CIFAR-10 readers, normalisation, batching.
//! - [`cli`]: configuration, checkpoints, metrics and the command drivers.

pub mod anytime;
pub mod cli;
pub mod construct;
pub mod data;
pub mod distill;
pub mod engine;
pub mod netgraph;
pub mod tensor;

pub use netgraph::{AssignmentTable, Level, Model, NetworkSpec, ParameterStore, UnitId};
pub use tensor::{RngStream, Tensor};
