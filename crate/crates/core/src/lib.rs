//! Deterministic simulator of dynamic GPU memory scheduling for DNN training:
//! execution order over fan/join networks, tensor liveness, a block pool
//! allocator, offload/prefetch with an LRU tensor cache, recomputation
//! planning and convolution workspace selection.

pub mod convselect;
pub mod costmodel;
pub mod fixtures;
mod incremental;
pub mod liveness;
pub mod model;
pub mod netgraph;
pub mod poolalloc;
pub mod recompute;
pub mod report;
pub mod schedule;
pub mod sim;
pub mod utp;

pub use costmodel::{CostConfig, LayerCost, Shape, TensorId};
pub use model::Model;
pub use netgraph::{build_execution_order, parse_network, ExecutionPlan, LayerId, LayerKind, NetworkDef};
pub use sim::{run_iteration, sweep, Features, SimConfig, SimError, SimReport};
