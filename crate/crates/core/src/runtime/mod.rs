//! Execution: worker threads hosting the nodes of a placed graph, a
//! controller that pumps instances under an admission cap, and the epoch
//! driver with its invariant checks.
//!
//! One thread per worker plus the controlling thread. Workers share nothing
//! mutable; every message travels through the destination worker's inbox (a
//! multiple-producer single-consumer channel), even when source and
//! destination share a worker, so backward prioritization is uniform. At an
//! epoch boundary the system is quiesced — no in-flight messages — which is
//! when optimizer flushes, replica averaging, cache-emptiness checks, and
//! metric harvesting happen.

mod engine;
mod placement;
mod replicas;
mod worker;

pub use engine::{Engine, EngineConfig, EpochReport};
pub use placement::Placement;
pub use replicas::{build_replicated, derive_replica_groups, ReplicaGroup};

use std::time::Duration;

use thiserror::Error;

use crate::ir::graph::GraphError;
use crate::ir::state::{InstanceId, State};
use crate::optim::OptimError;
use crate::tensor::Tensor;

/// Everything the controller feeds into the graph for one instance: a payload
/// and state per named entry point. The same plan drives both training and
/// evaluation passes; the pass sets the train flag.
#[derive(Debug, Clone)]
pub struct InstancePump {
    pub instance: InstanceId,
    /// `(entry name, payload, state)` triples, pumped in order.
    pub messages: Vec<(String, Tensor, State)>,
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{0}")]
    Config(String),
    #[error("placement covers {got} nodes but the graph has {want}")]
    PlacementSize { got: usize, want: usize },
    #[error("placement puts `{node}` on worker {worker} but only {workers} exist")]
    PlacementRange {
        node: String,
        worker: usize,
        workers: usize,
    },
    #[error("node `{node}` failed: {error}")]
    NodeFault { node: String, error: String },
    #[error(
        "no progress for {timeout:?} with {active} instance(s) in flight; cached keys:\n{dump}"
    )]
    Deadlock {
        active: usize,
        timeout: Duration,
        dump: String,
    },
    #[error("completion acknowledged for instance {0} beyond what was pumped")]
    UnknownCompletion(InstanceId),
    #[error("all workers exited while {0} instance(s) were in flight")]
    WorkersGone(usize),
    #[error("cached entries left behind by a drained pass:\n{0}")]
    ResidualCaches(String),
    #[error("message conservation violated: {sent} sent, {received} received")]
    MessagesLost { sent: u64, received: u64 },
    #[error("graph structure changed during the run")]
    StructureChanged,
}
