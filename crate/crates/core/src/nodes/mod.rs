//! Runtime behavior of every node kind.
//!
//! A node receives a [`Message`] that traversed one of its edges (forward
//! along an in-edge, backward along an out-edge) and appends zero or more
//! `(edge, message)` emissions. Forward emissions travel to the edge's head,
//! backward emissions to its tail; nodes never know where their neighbors
//! are placed.
//!
//! Two global invariants define correct node behavior:
//!
//! - **State restoration**: every forward message a node emits eventually
//!   comes back as a backward message bearing exactly the same state.
//! - **Cache hygiene**: whatever a node caches under a key projection on the
//!   forward pass is removed by the matching backward pass, so all caches are
//!   empty when a pass drains.

pub mod agg;
pub mod control;
pub mod loss;
pub mod npt;
pub mod ppt;

use thiserror::Error;

use crate::ir::graph::{EdgeId, GraphError, NodeId, NodeKind, PredicateError};
use crate::ir::message::Message;
use crate::ir::state::MissingField;
use crate::ir::IrGraph;
use crate::optim::{OptimError, OptimizerKind, ParamBlock};
use crate::tensor::TensorError;

pub use loss::LossMetrics;

/// Emission buffer filled by `process`.
pub type Emits = Vec<(EdgeId, Message)>;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Predicate(#[from] PredicateError),
    #[error(transparent)]
    MissingField(#[from] MissingField),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("forward message would overwrite cached key {key} (state {state})")]
    DuplicateKey { key: String, state: String },
    #[error("backward message for key {key} has no cached forward (state {state})")]
    MissingCache { key: String, state: String },
    #[error("payload shape {got:?} invalid: expected {expected}")]
    BadPayload {
        expected: String,
        got: (usize, usize),
    },
    #[error("message state lacks {what} structure data")]
    MissingAux { what: &'static str },
    #[error("message arrived on unexpected edge {0:?}")]
    UnexpectedEdge(EdgeId),
    #[error("{0}")]
    Inconsistent(String),
}

/// Construction-time options shared by all nodes of a run.
#[derive(Debug, Clone, Copy)]
pub struct NodeOpts {
    /// Global seed; parameter init derives a per-node stream from it.
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Gradient contributions required before a local optimizer step.
    pub min_update_frequency: usize,
}

/// A live node: static spec plus runtime state (parameters, caches).
#[derive(Debug)]
pub enum NodeInstance {
    Linear(ppt::LinearNode),
    Lookup(ppt::LookupNode),
    Gru(ppt::GruNode),
    Activation(npt::ActivationNode),
    SumRows(npt::SumRowsNode),
    Flatten(npt::FlattenNode),
    Transpose(npt::TransposeNode),
    Cond(control::CondNode),
    Phi(control::PhiNode),
    Isu(control::IsuNode),
    Group(agg::GroupNode),
    Ungroup(agg::UngroupNode),
    Concat(agg::ConcatNode),
    Split(agg::SplitNode),
    Bcast(agg::BcastNode),
    Flatmap(agg::FlatmapNode),
    Loss(loss::LossNode),
}

impl NodeInstance {
    /// Builds the runtime node for `id`, resolving the edges it talks over
    /// and initializing parameters from the per-node seed stream.
    pub fn from_spec(graph: &IrGraph, id: NodeId, opts: &NodeOpts) -> Result<Self, NodeError> {
        let spec = graph.node(id);
        let single_in = || -> Result<EdgeId, NodeError> {
            Ok(graph.in_edge(id, 0)?)
        };
        let single_out = || -> Result<EdgeId, NodeError> {
            Ok(graph.out_edge(id, 0)?)
        };
        let out_ports = |n: usize| -> Result<Vec<EdgeId>, NodeError> {
            (0..n as u16).map(|p| Ok(graph.out_edge(id, p)?)).collect()
        };
        let node = match &spec.kind {
            NodeKind::Linear { input, output, key } => NodeInstance::Linear(ppt::LinearNode::new(
                *input,
                *output,
                key.clone(),
                single_in()?,
                single_out()?,
                block_for(&spec.name, &spec.kind, opts),
            )),
            NodeKind::Lookup { vocab, dim, key } => NodeInstance::Lookup(ppt::LookupNode::new(
                *vocab,
                *dim,
                key.clone(),
                single_in()?,
                single_out()?,
                block_for(&spec.name, &spec.kind, opts),
            )),
            NodeKind::GruCell { dim, key } => NodeInstance::Gru(ppt::GruNode::new(
                *dim,
                key.clone(),
                single_in()?,
                single_out()?,
                block_for(&spec.name, &spec.kind, opts),
            )),
            NodeKind::Activation { f, key } => NodeInstance::Activation(npt::ActivationNode::new(
                *f,
                key.clone(),
                single_in()?,
                single_out()?,
            )),
            NodeKind::SumRows { key } => {
                NodeInstance::SumRows(npt::SumRowsNode::new(key.clone(), single_in()?, single_out()?))
            }
            NodeKind::FlattenRows { rows } => {
                NodeInstance::Flatten(npt::FlattenNode::new(*rows, single_in()?, single_out()?))
            }
            NodeKind::Transpose => {
                NodeInstance::Transpose(npt::TransposeNode::new(single_in()?, single_out()?))
            }
            NodeKind::Cond { predicate } => NodeInstance::Cond(control::CondNode::new(
                predicate.clone(),
                single_in()?,
                out_ports(predicate.arity())?,
            )),
            NodeKind::Phi { key } => NodeInstance::Phi(control::PhiNode::new(
                key.clone(),
                graph.in_edges(id).to_vec(),
                single_out()?,
            )),
            NodeKind::Isu { update } => NodeInstance::Isu(control::IsuNode::new(
                update.clone(),
                single_in()?,
                single_out()?,
            )),
            NodeKind::Group {
                key,
                expect,
                merge,
                order_by,
            } => NodeInstance::Group(agg::GroupNode::new(
                key.clone(),
                expect.clone(),
                merge.clone(),
                *order_by,
                single_out()?,
            )),
            NodeKind::Ungroup { key, gen } => NodeInstance::Ungroup(agg::UngroupNode::new(
                key.clone(),
                gen.clone(),
                single_in()?,
                single_out()?,
            )),
            NodeKind::Concat { key, inputs } => {
                let ins = (0..*inputs as u16)
                    .map(|p| Ok(graph.in_edge(id, p)?))
                    .collect::<Result<Vec<_>, NodeError>>()?;
                NodeInstance::Concat(agg::ConcatNode::new(key.clone(), ins, single_out()?))
            }
            NodeKind::Split { key, widths } => NodeInstance::Split(agg::SplitNode::new(
                key.clone(),
                widths.clone(),
                single_in()?,
                out_ports(widths.len())?,
            )),
            NodeKind::Bcast { key, fanout } => NodeInstance::Bcast(agg::BcastNode::new(
                key.clone(),
                single_in()?,
                out_ports(*fanout)?,
            )),
            NodeKind::Flatmap { key, gen } => NodeInstance::Flatmap(agg::FlatmapNode::new(
                key.clone(),
                gen.clone(),
                single_in()?,
                single_out()?,
            )),
            NodeKind::Loss { loss, key } => NodeInstance::Loss(loss::LossNode::new(
                *loss,
                key.clone(),
                graph.in_edge(id, 0)?,
                graph.in_edge(id, 1)?,
            )),
        };
        Ok(node)
    }

    pub fn process(
        &mut self,
        msg: Message,
        via: EdgeId,
        out: &mut Emits,
    ) -> Result<(), NodeError> {
        match self {
            NodeInstance::Linear(n) => n.process(msg, via, out),
            NodeInstance::Lookup(n) => n.process(msg, via, out),
            NodeInstance::Gru(n) => n.process(msg, via, out),
            NodeInstance::Activation(n) => n.process(msg, via, out),
            NodeInstance::SumRows(n) => n.process(msg, via, out),
            NodeInstance::Flatten(n) => n.process(msg, via, out),
            NodeInstance::Transpose(n) => n.process(msg, via, out),
            NodeInstance::Cond(n) => n.process(msg, via, out),
            NodeInstance::Phi(n) => n.process(msg, via, out),
            NodeInstance::Isu(n) => n.process(msg, via, out),
            NodeInstance::Group(n) => n.process(msg, via, out),
            NodeInstance::Ungroup(n) => n.process(msg, via, out),
            NodeInstance::Concat(n) => n.process(msg, via, out),
            NodeInstance::Split(n) => n.process(msg, via, out),
            NodeInstance::Bcast(n) => n.process(msg, via, out),
            NodeInstance::Flatmap(n) => n.process(msg, via, out),
            NodeInstance::Loss(n) => n.process(msg, via, out),
        }
    }

    /// Number of cached entries; zero for every node once a pass has drained.
    pub fn cache_len(&self) -> usize {
        match self {
            NodeInstance::Linear(n) => n.cache_len(),
            NodeInstance::Lookup(n) => n.cache_len(),
            NodeInstance::Gru(n) => n.cache_len(),
            NodeInstance::Activation(n) => n.cache_len(),
            NodeInstance::SumRows(n) => n.cache_len(),
            NodeInstance::Flatten(_) | NodeInstance::Transpose(_) => 0,
            NodeInstance::Cond(_) | NodeInstance::Isu(_) => 0,
            NodeInstance::Phi(n) => n.cache_len(),
            NodeInstance::Group(n) => n.cache_len(),
            NodeInstance::Ungroup(n) => n.cache_len(),
            NodeInstance::Concat(n) => n.cache_len(),
            NodeInstance::Split(n) => n.cache_len(),
            NodeInstance::Bcast(n) => n.cache_len(),
            NodeInstance::Flatmap(n) => n.cache_len(),
            NodeInstance::Loss(n) => n.cache_len(),
        }
    }

    /// Human-readable dump of cached keys, for deadlock and leak diagnostics.
    pub fn cache_dump(&self) -> Vec<String> {
        match self {
            NodeInstance::Linear(n) => n.cache_dump(),
            NodeInstance::Lookup(n) => n.cache_dump(),
            NodeInstance::Gru(n) => n.cache_dump(),
            NodeInstance::Activation(n) => n.cache_dump(),
            NodeInstance::SumRows(n) => n.cache_dump(),
            NodeInstance::Flatten(_) | NodeInstance::Transpose(_) => Vec::new(),
            NodeInstance::Cond(_) | NodeInstance::Isu(_) => Vec::new(),
            NodeInstance::Phi(n) => n.cache_dump(),
            NodeInstance::Group(n) => n.cache_dump(),
            NodeInstance::Ungroup(n) => n.cache_dump(),
            NodeInstance::Concat(n) => n.cache_dump(),
            NodeInstance::Split(n) => n.cache_dump(),
            NodeInstance::Bcast(n) => n.cache_dump(),
            NodeInstance::Flatmap(n) => n.cache_dump(),
            NodeInstance::Loss(n) => n.cache_dump(),
        }
    }

    pub fn param_block(&self) -> Option<&ParamBlock> {
        match self {
            NodeInstance::Linear(n) => Some(n.block()),
            NodeInstance::Lookup(n) => Some(n.block()),
            NodeInstance::Gru(n) => Some(n.block()),
            _ => None,
        }
    }

    pub fn param_block_mut(&mut self) -> Option<&mut ParamBlock> {
        match self {
            NodeInstance::Linear(n) => Some(n.block_mut()),
            NodeInstance::Lookup(n) => Some(n.block_mut()),
            NodeInstance::Gru(n) => Some(n.block_mut()),
            _ => None,
        }
    }

    pub fn loss_mut(&mut self) -> Option<&mut loss::LossNode> {
        match self {
            NodeInstance::Loss(n) => Some(n),
            _ => None,
        }
    }
}

/// Keyed forward cache with the insert/take discipline every stateful node
/// follows: inserts must land on a vacant key, takes must find one.
#[derive(Debug)]
pub(crate) struct KeyedCache<T> {
    map: std::collections::HashMap<crate::ir::state::Key, T>,
}

impl<T> KeyedCache<T> {
    pub fn new() -> Self {
        KeyedCache {
            map: std::collections::HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        key: crate::ir::state::Key,
        state: &crate::ir::state::State,
        value: T,
    ) -> Result<(), NodeError> {
        match self.map.entry(key) {
            std::collections::hash_map::Entry::Occupied(e) => Err(NodeError::DuplicateKey {
                key: e.key().to_string(),
                state: state.to_string(),
            }),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(value);
                Ok(())
            }
        }
    }

    pub fn take(
        &mut self,
        key: &crate::ir::state::Key,
        state: &crate::ir::state::State,
    ) -> Result<T, NodeError> {
        self.map.remove(key).ok_or_else(|| NodeError::MissingCache {
            key: key.to_string(),
            state: state.to_string(),
        })
    }

    pub fn get_mut(&mut self, key: &crate::ir::state::Key) -> Option<&mut T> {
        self.map.get_mut(key)
    }

    pub fn entry_or_insert_with(
        &mut self,
        key: crate::ir::state::Key,
        default: impl FnOnce() -> T,
    ) -> &mut T {
        self.map.entry(key).or_insert_with(default)
    }

    pub fn remove(&mut self, key: &crate::ir::state::Key) -> Option<T> {
        self.map.remove(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn dump(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.map.keys().map(|k| k.to_string()).collect();
        keys.sort();
        keys
    }
}

/// FNV-1a, used to derive stable per-node seed streams from node names.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seed-relevant name: replicas (`base@r0`, `base@r1`, ...) share their base
/// node's init stream so they start with identical parameters.
fn seed_name(name: &str) -> &str {
    name.split_once("@r").map_or(name, |(base, _)| base)
}

fn block_for(name: &str, kind: &NodeKind, opts: &NodeOpts) -> ParamBlock {
    let seed = opts.seed ^ fnv1a(seed_name(name).as_bytes());
    ParamBlock::new(
        ppt::init_params(kind, seed),
        opts.optimizer,
        opts.min_update_frequency,
    )
}
