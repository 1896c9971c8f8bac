//! The epoch driver: spawns workers over a placed graph, pumps instances
//! under the admission cap, waits for their completions, then quiesces and
//! enforces the global invariants.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::ir::graph::{EdgeId, NodeId, NodeKind};
use crate::ir::message::Message;
use crate::ir::state::{InstanceId, State};
use crate::ir::IrGraph;
use crate::nodes::{LossMetrics, NodeInstance, NodeOpts};
use crate::optim::{OptimizerKind, ParamBlock, StalenessStats};
use crate::runtime::placement::Placement;
use crate::runtime::replicas::{derive_replica_groups, ReplicaGroup};
use crate::runtime::worker::{CtrlEvent, Envelope, PassCounters, Router, Worker};
use crate::runtime::{InstancePump, RuntimeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Worker thread count; used when no explicit placement is given.
    pub workers: usize,
    /// Admission cap on concurrently in-flight instances.
    pub max_active_keys: usize,
    pub optimizer: OptimizerKind,
    /// Gradient contributions a parameter block accumulates before stepping.
    pub min_update_frequency: usize,
    /// Per-node overrides of `min_update_frequency`, by node name (replicas
    /// fall back to their base node's entry).
    pub muf_overrides: HashMap<String, usize>,
    /// Seed for parameter initialization (per-node streams derive from it).
    pub seed: u64,
    /// How long zero progress with instances in flight is tolerated.
    pub deadlock_timeout: Duration,
    /// When false, training passes accumulate gradients but never step the
    /// optimizer or sync replicas; used for gradient checking.
    pub apply_updates: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: 1,
            max_active_keys: 1,
            optimizer: OptimizerKind::sgd(0.1),
            min_update_frequency: 1,
            muf_overrides: HashMap::new(),
            seed: 0,
            deadlock_timeout: Duration::from_secs(5),
            apply_updates: true,
        }
    }
}

/// Everything a drained pass reports.
#[derive(Debug, Clone, Default)]
pub struct EpochReport {
    pub instances: usize,
    pub wall: Duration,
    pub loss: LossMetrics,
    pub staleness: StalenessStats,
    pub skipped_non_finite: u64,
    /// Optimizer updates applied during the pass (including the final flush).
    pub updates: u64,
    pub messages_processed: u64,
    pub max_active_observed: usize,
}

impl EpochReport {
    pub fn instances_per_sec(&self) -> f64 {
        let secs = self.wall.as_secs_f64();
        if secs > 0.0 {
            self.instances as f64 / secs
        } else {
            0.0
        }
    }
}

pub struct Engine {
    graph: Arc<IrGraph>,
    placement: Placement,
    assignment: Arc<Vec<usize>>,
    nodes: Vec<NodeInstance>,
    replica_groups: Vec<ReplicaGroup>,
    cfg: EngineConfig,
    structure_hash: u64,
}

impl Engine {
    pub fn new(
        graph: IrGraph,
        placement: Option<Placement>,
        cfg: EngineConfig,
    ) -> Result<Self, RuntimeError> {
        if cfg.max_active_keys == 0 {
            return Err(RuntimeError::Config(
                "max_active_keys must be at least 1".into(),
            ));
        }
        if cfg.min_update_frequency == 0 {
            return Err(RuntimeError::Config(
                "min_update_frequency must be at least 1".into(),
            ));
        }
        let placement = match placement {
            Some(p) => {
                if p.assignments().len() != graph.node_count() {
                    return Err(RuntimeError::PlacementSize {
                        got: p.assignments().len(),
                        want: graph.node_count(),
                    });
                }
                p
            }
            None => Placement::default_for(&graph, cfg.workers)?,
        };
        let mut nodes = Vec::with_capacity(graph.node_count());
        for id in graph.node_ids() {
            let name = graph.name(id);
            let muf = cfg
                .muf_overrides
                .get(name)
                .or_else(|| {
                    name.rsplit_once("@r")
                        .and_then(|(base, _)| cfg.muf_overrides.get(base))
                })
                .copied()
                .unwrap_or(cfg.min_update_frequency);
            let opts = NodeOpts {
                seed: cfg.seed,
                optimizer: cfg.optimizer,
                min_update_frequency: muf,
            };
            let node = NodeInstance::from_spec(&graph, id, &opts).map_err(|e| {
                RuntimeError::Config(format!("building node `{name}`: {e}"))
            })?;
            nodes.push(node);
        }
        let replica_groups = derive_replica_groups(&graph);
        let structure_hash = graph.structure_hash();
        let assignment = Arc::new(placement.assignments().to_vec());
        Ok(Engine {
            graph: Arc::new(graph),
            placement,
            assignment,
            nodes,
            replica_groups,
            cfg,
            structure_hash,
        })
    }

    pub fn graph(&self) -> &IrGraph {
        &self.graph
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn replica_groups(&self) -> &[ReplicaGroup] {
        &self.replica_groups
    }

    /// Names of all parameterized nodes, in graph order.
    pub fn parameterized_nodes(&self) -> Vec<String> {
        self.graph
            .node_ids()
            .filter(|&id| self.graph.node(id).kind.is_parameterized())
            .map(|id| self.graph.name(id).to_string())
            .collect()
    }

    pub fn param_block(&self, name: &str) -> Option<&ParamBlock> {
        let id = self.graph.node_id(name).ok()?;
        self.nodes[id.0 as usize].param_block()
    }

    pub fn param_block_mut(&mut self, name: &str) -> Option<&mut ParamBlock> {
        let id = self.graph.node_id(name).ok()?;
        self.nodes[id.0 as usize].param_block_mut()
    }

    /// All parameters, sorted by node name: the unit of weight save/load and
    /// of bitwise trajectory comparison in tests.
    pub fn params_snapshot(&self) -> Vec<(String, Vec<Tensor>)> {
        let mut out: Vec<(String, Vec<Tensor>)> = self
            .graph
            .node_ids()
            .filter_map(|id| {
                self.nodes[id.0 as usize]
                    .param_block()
                    .map(|b| (self.graph.name(id).to_string(), b.params().to_vec()))
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn load_params(&mut self, params: Vec<(String, Vec<Tensor>)>) -> Result<(), RuntimeError> {
        for (name, tensors) in params {
            let block = self
                .param_block_mut(&name)
                .ok_or_else(|| RuntimeError::Config(format!("no parameters under `{name}`")))?;
            block.set_params(tensors)?;
        }
        Ok(())
    }

    pub fn run_train_epoch(
        &mut self,
        instances: &[InstancePump],
    ) -> Result<EpochReport, RuntimeError> {
        self.run_pass(instances, true)
    }

    pub fn run_eval(&mut self, instances: &[InstancePump]) -> Result<EpochReport, RuntimeError> {
        self.run_pass(instances, false)
    }

    fn run_pass(
        &mut self,
        instances: &[InstancePump],
        train: bool,
    ) -> Result<EpochReport, RuntimeError> {
        let pumps = self.resolve(instances, train)?;
        let updates_before: u64 = self.blocks().map(|b| b.update_counter()).sum();
        let graph = self.graph.clone();
        let assignment = self.assignment.clone();
        let workers = self.placement.workers();
        let mak = self.cfg.max_active_keys;
        let deadlock_timeout = self.cfg.deadlock_timeout;
        let counters = Arc::new(PassCounters::default());

        let mut buckets: Vec<HashMap<NodeId, &mut NodeInstance>> =
            (0..workers).map(|_| HashMap::new()).collect();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            buckets[assignment[i]].insert(NodeId(i as u32), node);
        }

        let start = Instant::now();
        let outcome = std::thread::scope(|s| {
            let (ctrl_tx, ctrl_rx) = mpsc::channel();
            let mut inboxes = Vec::with_capacity(workers);
            let mut receivers = Vec::with_capacity(workers);
            for _ in 0..workers {
                let (tx, rx) = mpsc::channel();
                inboxes.push(tx);
                receivers.push(rx);
            }
            let router = Router {
                graph: graph.clone(),
                placement: assignment.clone(),
                inboxes: Arc::new(inboxes),
                ctrl: ctrl_tx,
                counters: counters.clone(),
            };
            for (rx, bucket) in receivers.into_iter().zip(buckets) {
                let worker = Worker {
                    nodes: bucket,
                    inbox: rx,
                    router: router.clone(),
                };
                s.spawn(move || worker.run());
            }
            let outcome = control(&router, &ctrl_rx, &pumps, train, mak, deadlock_timeout);
            for tx in router.inboxes.iter() {
                let _ = tx.send(Envelope::Stop);
            }
            outcome
        });
        let wall = start.elapsed();

        let max_active_observed = match outcome {
            Outcome::Done { max_active } => max_active,
            Outcome::Fault { node, error } => return Err(RuntimeError::NodeFault { node, error }),
            Outcome::Deadlock { active } => {
                return Err(RuntimeError::Deadlock {
                    active,
                    timeout: deadlock_timeout,
                    dump: self.cache_dump(),
                })
            }
            Outcome::UnknownCompletion(id) => return Err(RuntimeError::UnknownCompletion(id)),
            Outcome::WorkersGone(active) => return Err(RuntimeError::WorkersGone(active)),
        };

        let sent = counters.sent.load(Ordering::Relaxed);
        let received = counters.received.load(Ordering::Relaxed);
        if sent != received {
            return Err(RuntimeError::MessagesLost { sent, received });
        }
        if self.graph.structure_hash() != self.structure_hash {
            return Err(RuntimeError::StructureChanged);
        }

        if train && self.cfg.apply_updates {
            for block in self.blocks_mut() {
                block.flush()?;
            }
            self.sync_replicas()?;
        }

        let residue = self.cache_dump();
        if !residue.is_empty() {
            return Err(RuntimeError::ResidualCaches(residue));
        }

        let mut loss = LossMetrics::default();
        for node in &mut self.nodes {
            if let Some(l) = node.loss_mut() {
                loss.merge(&l.metrics_mut().take());
            }
        }
        let mut staleness = StalenessStats::default();
        let mut skipped = 0;
        for block in self.blocks_mut() {
            staleness.merge(&std::mem::take(&mut block.staleness));
            skipped += std::mem::replace(&mut block.skipped_non_finite, 0);
        }
        let updates_after: u64 = self.blocks().map(|b| b.update_counter()).sum();

        Ok(EpochReport {
            instances: instances.len(),
            wall,
            loss,
            staleness,
            skipped_non_finite: skipped,
            updates: updates_after - updates_before,
            messages_processed: counters.processed.load(Ordering::Relaxed),
            max_active_observed,
        })
    }

    fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.nodes.iter().filter_map(|n| n.param_block())
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        self.nodes.iter_mut().filter_map(|n| n.param_block_mut())
    }

    /// Drops any gradient contributions accumulated since the last optimizer
    /// step without applying them.
    pub fn discard_pending(&mut self) {
        for block in self.blocks_mut() {
            block.discard_pending();
        }
    }

    /// Averages parameters and optimizer slots across each replica group.
    fn sync_replicas(&mut self) -> Result<(), RuntimeError> {
        for gi in 0..self.replica_groups.len() {
            let members: HashSet<u32> = self.replica_groups[gi]
                .members
                .iter()
                .map(|id| id.0)
                .collect();
            let mut blocks: Vec<&mut ParamBlock> = self
                .nodes
                .iter_mut()
                .enumerate()
                .filter(|(i, _)| members.contains(&(*i as u32)))
                .filter_map(|(_, n)| n.param_block_mut())
                .collect();
            ParamBlock::sync_replicas(&mut blocks)?;
        }
        Ok(())
    }

    /// All non-empty node caches, formatted one node per line. Empty string
    /// when every cache is empty.
    fn cache_dump(&self) -> String {
        let mut lines = Vec::new();
        for id in self.graph.node_ids() {
            let node = &self.nodes[id.0 as usize];
            if node.cache_len() == 0 {
                continue;
            }
            let mut keys = node.cache_dump();
            let extra = keys.len().saturating_sub(8);
            keys.truncate(8);
            let mut line = format!("  {}: {}", self.graph.name(id), keys.join(" "));
            if extra > 0 {
                line.push_str(&format!(" (+{extra} more)"));
            }
            lines.push(line);
        }
        lines.join("\n")
    }

    /// Resolves entry names to edges and computes each instance's expected
    /// acknowledgement count for the pass.
    fn resolve<'a>(
        &self,
        instances: &'a [InstancePump],
        train: bool,
    ) -> Result<Vec<Resolved<'a>>, RuntimeError> {
        let entries: HashMap<&str, EdgeId> = self
            .graph
            .entries()
            .iter()
            .map(|(n, e)| (n.as_str(), *e))
            .collect();
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(instances.len());
        for plan in instances {
            if !seen.insert(plan.instance) {
                return Err(RuntimeError::Config(format!(
                    "instance id {} pumped twice in one pass",
                    plan.instance
                )));
            }
            let mut msgs = Vec::with_capacity(plan.messages.len());
            let mut expected = 0;
            for (entry, payload, state) in &plan.messages {
                let edge = *entries.get(entry.as_str()).ok_or_else(|| {
                    RuntimeError::Config(format!("no controller entry named `{entry}`"))
                })?;
                if state.instance != plan.instance {
                    return Err(RuntimeError::Config(format!(
                        "instance {} pumps a message with state instance {}",
                        plan.instance, state.instance
                    )));
                }
                let e = self.graph.edge(edge);
                let is_label = matches!(self.graph.node(e.to).kind, NodeKind::Loss { .. })
                    && e.to_port == 1;
                if train || is_label {
                    expected += 1;
                }
                msgs.push((edge, payload, state));
            }
            if expected == 0 {
                return Err(RuntimeError::Config(format!(
                    "instance {} cannot complete: it pumps no message whose \
                     acknowledgement would return (no loss label in evaluation)",
                    plan.instance
                )));
            }
            out.push(Resolved {
                instance: plan.instance,
                msgs,
                expected,
            });
        }
        Ok(out)
    }
}

struct Resolved<'a> {
    instance: InstanceId,
    msgs: Vec<(EdgeId, &'a Tensor, &'a State)>,
    expected: usize,
}

enum Outcome {
    Done { max_active: usize },
    Fault { node: String, error: String },
    Deadlock { active: usize },
    UnknownCompletion(InstanceId),
    WorkersGone(usize),
}

/// Greedy admission loop: pump while below the cap, then wait for
/// acknowledgements; abort when progress stops with work still in flight.
fn control(
    router: &Router,
    rx: &Receiver<CtrlEvent>,
    pumps: &[Resolved<'_>],
    train: bool,
    mak: usize,
    deadlock_timeout: Duration,
) -> Outcome {
    const TICK: Duration = Duration::from_millis(20);
    let total = pumps.len();
    let mut next = 0;
    let mut completed = 0;
    let mut active: HashMap<InstanceId, usize> = HashMap::new();
    let mut max_active = 0;
    let mut last_progress = router.counters.processed.load(Ordering::Relaxed);
    let mut stalled = Duration::ZERO;
    while completed < total {
        while active.len() < mak && next < total {
            let plan = &pumps[next];
            active.insert(plan.instance, plan.expected);
            for &(edge, payload, state) in &plan.msgs {
                router.send(edge, Message::forward(payload.clone(), state.clone(), train));
            }
            next += 1;
        }
        max_active = max_active.max(active.len());
        debug_assert!(active.len() <= mak);
        match rx.recv_timeout(TICK) {
            Ok(CtrlEvent::Ack { instance }) => {
                router.counters.received.fetch_add(1, Ordering::Relaxed);
                stalled = Duration::ZERO;
                match active.get_mut(&instance) {
                    None => return Outcome::UnknownCompletion(instance),
                    Some(remaining) => {
                        *remaining -= 1;
                        if *remaining == 0 {
                            active.remove(&instance);
                            completed += 1;
                        }
                    }
                }
            }
            Ok(CtrlEvent::Fault { node, error }) => return Outcome::Fault { node, error },
            Err(RecvTimeoutError::Timeout) => {
                let p = router.counters.processed.load(Ordering::Relaxed);
                if p == last_progress {
                    stalled += TICK;
                    if stalled >= deadlock_timeout {
                        return Outcome::Deadlock {
                            active: active.len(),
                        };
                    }
                } else {
                    last_progress = p;
                    stalled = Duration::ZERO;
                }
            }
            Err(RecvTimeoutError::Disconnected) => return Outcome::WorkersGone(active.len()),
        }
    }
    Outcome::Done { max_active }
}
