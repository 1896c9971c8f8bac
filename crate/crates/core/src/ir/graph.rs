//! Static instruction graphs: node kinds with their configuration, edges
//! between (node, port) endpoints, controller entry points, and validation.
//!
//! The graph never changes during a run; all dynamic behavior lives in the
//! states of the messages flowing through it.

use std::collections::{HashMap, HashSet, VecDeque};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::state::{Field, KeyField, KeyFn, State};
use crate::tensor::Activation;

pub type Port = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

/// Sentinel endpoint for messages entering from or acknowledged back to the
/// controller. Never a real node.
pub const CONTROLLER: NodeId = NodeId(u32::MAX);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: NodeId,
    pub from_port: Port,
    pub to: NodeId,
    pub to_port: Port,
}

/// Routing predicate of a `Cond` node: maps a state to one of `arity` output
/// ports without touching the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "test", rename_all = "snake_case")]
pub enum Predicate {
    /// Port 0 iff `state[a] < state[b]`, else port 1.
    FieldLtField { a: Field, b: Field },
    /// Port 0 iff `state[field] < value`, else port 1.
    FieldLtConst { field: Field, value: i64 },
    /// Port 0 iff `state[field] == value`, else port 1.
    FieldEqConst { field: Field, value: i64 },
    /// Port is the field value itself, which must lie in `0..arity`.
    PortOfField { field: Field, arity: usize },
    /// Port is the sum of the projected parts modulo `arity`; used to spread
    /// traffic round-robin over replicas.
    SumMod { parts: Vec<KeyField>, arity: usize },
}

impl Predicate {
    pub fn arity(&self) -> usize {
        match self {
            Predicate::FieldLtField { .. }
            | Predicate::FieldLtConst { .. }
            | Predicate::FieldEqConst { .. } => 2,
            Predicate::PortOfField { arity, .. } | Predicate::SumMod { arity, .. } => *arity,
        }
    }

    pub fn route(&self, state: &State) -> Result<Port, PredicateError> {
        let field = |f: Field| {
            state
                .get(f)
                .ok_or(PredicateError::MissingField { field: f })
        };
        let port = match self {
            Predicate::FieldLtField { a, b } => (field(*a)? >= field(*b)?) as Port,
            Predicate::FieldLtConst { field: f, value } => (field(*f)? >= *value) as Port,
            Predicate::FieldEqConst { field: f, value } => (field(*f)? != *value) as Port,
            Predicate::PortOfField { field: f, arity } => {
                let v = field(*f)?;
                if v < 0 || v as usize >= *arity {
                    return Err(PredicateError::PortOutOfRange {
                        value: v,
                        arity: *arity,
                    });
                }
                v as Port
            }
            Predicate::SumMod { parts, arity } => {
                let mut sum: i64 = 0;
                for p in parts {
                    sum = sum.wrapping_add(match p {
                        KeyField::Instance => state.instance,
                        KeyField::Field(f) => field(*f)?,
                    });
                }
                (sum.rem_euclid(*arity as i64)) as Port
            }
        };
        Ok(port)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PredicateError {
    #[error("predicate needs field `{}` which the state lacks", field.as_str())]
    MissingField { field: Field },
    #[error("predicate produced port {value} outside 0..{arity}")]
    PortOutOfRange { value: i64, arity: usize },
}

/// Invertible state update applied by an `Isu` node: `apply` on the forward
/// pass, `invert` on the backward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "f", rename_all = "snake_case")]
pub enum StateUpdate {
    AddConst { field: Field, delta: i64 },
}

impl StateUpdate {
    pub fn apply(&self, state: &State) -> Result<State, PredicateError> {
        match self {
            StateUpdate::AddConst { field, delta } => {
                let v = state
                    .get(*field)
                    .ok_or(PredicateError::MissingField { field: *field })?;
                let mut out = state.clone();
                out.set(*field, v + delta);
                Ok(out)
            }
        }
    }

    pub fn invert(&self, state: &State) -> Result<State, PredicateError> {
        match self {
            StateUpdate::AddConst { field, delta } => {
                let v = state
                    .get(*field)
                    .ok_or(PredicateError::MissingField { field: *field })?;
                let mut out = state.clone();
                out.set(*field, v - delta);
                Ok(out)
            }
        }
    }
}

/// How a `Group` node knows when a bucket is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "count", rename_all = "snake_case")]
pub enum GroupExpect {
    /// Fixed member count.
    Const { n: usize },
    /// Number of nodes of the instance's graph structure.
    NodesOfInstance,
    /// Number of edges of the member's `edge_type` in the graph structure.
    EdgesOfType,
    /// In-degree of the member's `dst` node in the graph structure.
    InDegreeOfDst,
}

/// How a `Group` node derives the merged state from its member states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MergeRule {
    /// Keep only the listed fields (all members agree on them by
    /// construction of the key).
    Project { keep: Vec<Field> },
    /// Keep the listed fields and additionally copy `from` into `to`.
    ProjectRename {
        keep: Vec<Field>,
        from: Field,
        to: Field,
    },
    /// Move one level up a tree: the merged node is the members' parent,
    /// with `parent`/`root` fields recomputed from the tree structure.
    TreeParent,
}

/// How an `Ungroup` node derives one state per payload row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gen", rename_all = "snake_case")]
pub enum RowGen {
    /// Row `i` becomes a message with `node = i`; row count must equal the
    /// instance's node count.
    NodesOfInstance { keep: Vec<Field> },
    /// Row `i` becomes the `i`-th edge (ascending edge id) of the state's
    /// `edge_type`, with `edge`/`src`/`dst`/`edge_type` fields set.
    EdgesOfType { keep: Vec<Field> },
}

/// How a `Flatmap` node fans one message out into several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gen", rename_all = "snake_case")]
pub enum FanoutGen {
    /// One copy per out-edge of the state's `node`, with edge fields set.
    OutEdgesOfNode { keep: Vec<Field> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SquaredError,
}

/// Everything a node is, statically.
///
/// Parameterized payload transforms (`Linear`, `Lookup`, `GruCell`) own
/// weights at runtime; the `key` of a stateful kind names the projection that
/// keys its cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeKind {
    /// Dense affine map `x * W + b` applied per payload row.
    Linear {
        input: usize,
        output: usize,
        key: KeyFn,
    },
    /// Embedding table; payload is a 1 x k row of token ids, output is k x dim.
    Lookup { vocab: usize, dim: usize, key: KeyFn },
    /// GRU cell over a payload of concatenated `[m | h]` halves of width `dim`.
    GruCell { dim: usize, key: KeyFn },
    /// Pointwise activation.
    Activation { f: Activation, key: KeyFn },
    /// Sums payload rows into a single row.
    SumRows { key: KeyFn },
    /// Reshapes an `r x c` payload into `1 x r*c`; `rows` pins `r`.
    FlattenRows { rows: usize },
    /// Transposes the payload.
    Transpose,
    /// Routes by state to one of its output ports; payload untouched.
    Cond { predicate: Predicate },
    /// Join point for alternative dataflow paths; records the origin of each
    /// key so the backward message retraces it.
    Phi { key: KeyFn },
    /// Invertible state update.
    Isu { update: StateUpdate },
    /// Collects messages sharing a key into one stacked payload.
    Group {
        key: KeyFn,
        expect: GroupExpect,
        merge: MergeRule,
        /// Field whose ascending value orders the stacked rows.
        order_by: Field,
    },
    /// Splits a stacked payload into one message per row.
    Ungroup { key: KeyFn, gen: RowGen },
    /// Joins `inputs` payloads with equal keys by column concatenation.
    Concat { key: KeyFn, inputs: usize },
    /// Splits payload columns into blocks of the given widths, one per port.
    Split { key: KeyFn, widths: Vec<usize> },
    /// Copies one message to every output port; backward sums the gradients.
    Bcast { key: KeyFn, fanout: usize },
    /// Fans one message out into a state-dependent number of copies;
    /// backward sums the returning gradients.
    Flatmap { key: KeyFn, gen: FanoutGen },
    /// Scores predictions (port 0) against labels (port 1) and starts the
    /// backward pass.
    Loss { loss: LossKind, key: KeyFn },
}

impl NodeKind {
    /// True for kinds that own trainable parameters.
    pub fn is_parameterized(&self) -> bool {
        matches!(
            self,
            NodeKind::Linear { .. } | NodeKind::Lookup { .. } | NodeKind::GruCell { .. }
        )
    }

    pub fn op_name(&self) -> &'static str {
        match self {
            NodeKind::Linear { .. } => "linear",
            NodeKind::Lookup { .. } => "lookup",
            NodeKind::GruCell { .. } => "gru_cell",
            NodeKind::Activation { .. } => "activation",
            NodeKind::SumRows { .. } => "sum_rows",
            NodeKind::FlattenRows { .. } => "flatten_rows",
            NodeKind::Transpose => "transpose",
            NodeKind::Cond { .. } => "cond",
            NodeKind::Phi { .. } => "phi",
            NodeKind::Isu { .. } => "isu",
            NodeKind::Group { .. } => "group",
            NodeKind::Ungroup { .. } => "ungroup",
            NodeKind::Concat { .. } => "concat",
            NodeKind::Split { .. } => "split",
            NodeKind::Bcast { .. } => "bcast",
            NodeKind::Flatmap { .. } => "flatmap",
            NodeKind::Loss { .. } => "loss",
        }
    }

    /// Output ports the kind must have edges on: `Some(n)` means exactly
    /// ports `0..n`, `None` means exactly one edge on port 0.
    fn out_arity(&self) -> Option<usize> {
        match self {
            NodeKind::Cond { predicate } => Some(predicate.arity()),
            NodeKind::Bcast { fanout, .. } => Some(*fanout),
            NodeKind::Split { widths, .. } => Some(widths.len()),
            NodeKind::Loss { .. } => Some(0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("edge references unknown node id {0}")]
    UnknownNode(u32),
    #[error("node `{node}` is missing an edge on output port {port}")]
    MissingOutPort { node: String, port: Port },
    #[error("node `{node}` has an edge on unexpected output port {port}")]
    UnexpectedOutPort { node: String, port: Port },
    #[error("node `{node}` has {got} edges on output port {port}, expected one")]
    AmbiguousOutPort { node: String, port: Port, got: usize },
    #[error("node `{node}` expects {expected} but has {got} incoming edges")]
    BadInArity {
        node: String,
        expected: String,
        got: usize,
    },
    #[error("node `{node}` has no incoming edge on input port {port}")]
    MissingInPort { node: String, port: Port },
    #[error("node `{0}` is unreachable from any controller entry")]
    Unreachable(String),
    #[error("cycle without a phi node: {0:?}")]
    CycleWithoutPhi(Vec<String>),
    #[error("no controller entry named `{0}`")]
    NoSuchEntry(String),
    #[error("unknown node name `{0}`")]
    UnknownName(String),
}

/// Incrementally assembles an [`IrGraph`].
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<NodeSpec>,
    edges: Vec<Edge>,
    entries: Vec<(String, usize)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, name: impl Into<String>, kind: NodeKind) -> NodeId {
        self.nodes.push(NodeSpec {
            name: name.into(),
            kind,
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn edge(&mut self, from: NodeId, from_port: Port, to: NodeId, to_port: Port) {
        self.edges.push(Edge {
            from,
            from_port,
            to,
            to_port,
        });
    }

    /// Edge from port 0 to port 0, the common case.
    pub fn simple_edge(&mut self, from: NodeId, to: NodeId) {
        self.edge(from, 0, to, 0);
    }

    /// Declares a named controller entry point delivering into `(to, to_port)`.
    pub fn entry(&mut self, name: impl Into<String>, to: NodeId, to_port: Port) {
        self.edges.push(Edge {
            from: CONTROLLER,
            from_port: self.entries.len() as Port,
            to,
            to_port,
        });
        self.entries.push((name.into(), self.edges.len() - 1));
    }

    pub fn build(self) -> Result<IrGraph, Vec<GraphError>> {
        let graph = IrGraph::assemble(self.nodes, self.edges, self.entries);
        match graph {
            Ok(g) => {
                let errors = g.validate();
                if errors.is_empty() {
                    Ok(g)
                } else {
                    Err(errors)
                }
            }
            Err(e) => Err(vec![e]),
        }
    }
}

/// A validated static graph. Structure is immutable after construction;
/// [`IrGraph::structure_hash`] witnesses that during runs.
#[derive(Debug, Clone)]
pub struct IrGraph {
    nodes: Vec<NodeSpec>,
    edges: Vec<Edge>,
    entries: Vec<(String, EdgeId)>,
    out: Vec<Vec<EdgeId>>,
    inn: Vec<Vec<EdgeId>>,
    by_name: HashMap<String, NodeId>,
}

impl IrGraph {
    fn assemble(
        nodes: Vec<NodeSpec>,
        edges: Vec<Edge>,
        entries: Vec<(String, usize)>,
    ) -> Result<IrGraph, GraphError> {
        let n = nodes.len();
        let mut by_name = HashMap::new();
        for (i, spec) in nodes.iter().enumerate() {
            if by_name.insert(spec.name.clone(), NodeId(i as u32)).is_some() {
                return Err(GraphError::DuplicateName(spec.name.clone()));
            }
        }
        let mut out = vec![Vec::new(); n];
        let mut inn = vec![Vec::new(); n];
        for (i, e) in edges.iter().enumerate() {
            if e.from != CONTROLLER {
                let idx = e.from.0 as usize;
                if idx >= n {
                    return Err(GraphError::UnknownNode(e.from.0));
                }
                out[idx].push(EdgeId(i as u32));
            }
            let idx = e.to.0 as usize;
            if e.to == CONTROLLER || idx >= n {
                return Err(GraphError::UnknownNode(e.to.0));
            }
            inn[idx].push(EdgeId(i as u32));
        }
        for list in &mut out {
            list.sort_by_key(|e| edges[e.0 as usize].from_port);
        }
        for list in &mut inn {
            list.sort_by_key(|e| edges[e.0 as usize].to_port);
        }
        Ok(IrGraph {
            nodes,
            edges,
            entries: entries
                .into_iter()
                .map(|(name, i)| (name, EdgeId(i as u32)))
                .collect(),
            out,
            inn,
            by_name,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id.0 as usize]
    }

    pub fn name(&self, id: NodeId) -> &str {
        if id == CONTROLLER {
            "<controller>"
        } else {
            &self.nodes[id.0 as usize].name
        }
    }

    pub fn node_id(&self, name: &str) -> Result<NodeId, GraphError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::UnknownName(name.to_string()))
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id.0 as usize]
    }

    pub fn out_edges(&self, node: NodeId) -> &[EdgeId] {
        &self.out[node.0 as usize]
    }

    pub fn in_edges(&self, node: NodeId) -> &[EdgeId] {
        &self.inn[node.0 as usize]
    }

    /// The unique out-edge on `port`.
    pub fn out_edge(&self, node: NodeId, port: Port) -> Result<EdgeId, GraphError> {
        self.out[node.0 as usize]
            .iter()
            .copied()
            .find(|e| self.edge(*e).from_port == port)
            .ok_or_else(|| GraphError::MissingOutPort {
                node: self.name(node).to_string(),
                port,
            })
    }

    /// The unique in-edge on `port`.
    pub fn in_edge(&self, node: NodeId, port: Port) -> Result<EdgeId, GraphError> {
        self.inn[node.0 as usize]
            .iter()
            .copied()
            .find(|e| self.edge(*e).to_port == port)
            .ok_or_else(|| GraphError::MissingInPort {
                node: self.name(node).to_string(),
                port,
            })
    }

    pub fn entries(&self) -> &[(String, EdgeId)] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Result<EdgeId, GraphError> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| *e)
            .ok_or_else(|| GraphError::NoSuchEntry(name.to_string()))
    }

    /// Node ids of all `Loss` nodes.
    pub fn loss_nodes(&self) -> Vec<NodeId> {
        self.node_ids()
            .filter(|id| matches!(self.node(*id).kind, NodeKind::Loss { .. }))
            .collect()
    }

    fn validate(&self) -> Vec<GraphError> {
        let mut errors = Vec::new();
        self.validate_out_ports(&mut errors);
        self.validate_in_arity(&mut errors);
        self.validate_reachability(&mut errors);
        self.validate_cycles(&mut errors);
        errors
    }

    fn validate_out_ports(&self, errors: &mut Vec<GraphError>) {
        for id in self.node_ids() {
            let spec = self.node(id);
            let mut per_port: HashMap<Port, usize> = HashMap::new();
            for &e in self.out_edges(id) {
                *per_port.entry(self.edge(e).from_port).or_insert(0) += 1;
            }
            let expected: Vec<Port> = match spec.kind.out_arity() {
                Some(n) => (0..n as Port).collect(),
                None => vec![0],
            };
            for &p in &expected {
                match per_port.get(&p) {
                    None => errors.push(GraphError::MissingOutPort {
                        node: spec.name.clone(),
                        port: p,
                    }),
                    Some(1) => {}
                    Some(&got) => errors.push(GraphError::AmbiguousOutPort {
                        node: spec.name.clone(),
                        port: p,
                        got,
                    }),
                }
            }
            for &p in per_port.keys() {
                if !expected.contains(&p) {
                    errors.push(GraphError::UnexpectedOutPort {
                        node: spec.name.clone(),
                        port: p,
                    });
                }
            }
        }
    }

    fn validate_in_arity(&self, errors: &mut Vec<GraphError>) {
        for id in self.node_ids() {
            let spec = self.node(id);
            let in_edges = self.in_edges(id);
            match &spec.kind {
                NodeKind::Phi { .. } | NodeKind::Group { .. } => {
                    if in_edges.is_empty() {
                        errors.push(GraphError::BadInArity {
                            node: spec.name.clone(),
                            expected: "at least one".into(),
                            got: 0,
                        });
                    }
                }
                NodeKind::Concat { inputs, .. } => {
                    for p in 0..*inputs as Port {
                        let c = in_edges
                            .iter()
                            .filter(|e| self.edge(**e).to_port == p)
                            .count();
                        if c != 1 {
                            errors.push(GraphError::MissingInPort {
                                node: spec.name.clone(),
                                port: p,
                            });
                        }
                    }
                    if in_edges.len() != *inputs {
                        errors.push(GraphError::BadInArity {
                            node: spec.name.clone(),
                            expected: format!("exactly {inputs}"),
                            got: in_edges.len(),
                        });
                    }
                }
                NodeKind::Loss { .. } => {
                    for p in [0, 1] {
                        let c = in_edges
                            .iter()
                            .filter(|e| self.edge(**e).to_port == p)
                            .count();
                        if c != 1 {
                            errors.push(GraphError::MissingInPort {
                                node: spec.name.clone(),
                                port: p,
                            });
                        }
                    }
                }
                _ => {
                    if in_edges.len() != 1 {
                        errors.push(GraphError::BadInArity {
                            node: spec.name.clone(),
                            expected: "exactly one".into(),
                            got: in_edges.len(),
                        });
                    }
                }
            }
        }
    }

    fn validate_reachability(&self, errors: &mut Vec<GraphError>) {
        let mut seen = HashSet::new();
        let mut queue: VecDeque<NodeId> = self
            .entries
            .iter()
            .map(|(_, e)| self.edge(*e).to)
            .collect();
        for id in &queue {
            seen.insert(*id);
        }
        while let Some(id) = queue.pop_front() {
            for &e in self.out_edges(id) {
                let next = self.edge(e).to;
                if seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        for id in self.node_ids() {
            if !seen.contains(&id) {
                errors.push(GraphError::Unreachable(self.name(id).to_string()));
            }
        }
    }

    fn validate_cycles(&self, errors: &mut Vec<GraphError>) {
        let pg = self.petgraph();
        for scc in petgraph::algo::tarjan_scc(&pg) {
            let cyclic = scc.len() > 1
                || scc
                    .first()
                    .is_some_and(|&v| pg.contains_edge(v, v));
            if !cyclic {
                continue;
            }
            let has_phi = scc.iter().any(|v| {
                matches!(
                    self.nodes[v.index()].kind,
                    NodeKind::Phi { .. }
                )
            });
            if !has_phi {
                errors.push(GraphError::CycleWithoutPhi(
                    scc.iter()
                        .map(|v| self.nodes[v.index()].name.clone())
                        .collect(),
                ));
            }
        }
    }

    fn petgraph(&self) -> petgraph::graph::DiGraph<(), ()> {
        let mut pg = petgraph::graph::DiGraph::new();
        let idx: Vec<_> = (0..self.nodes.len()).map(|_| pg.add_node(())).collect();
        for e in &self.edges {
            if e.from != CONTROLLER {
                pg.add_edge(idx[e.from.0 as usize], idx[e.to.0 as usize], ());
            }
        }
        pg
    }

    /// Topological order of the nodes, treating edges that close a cycle into
    /// a `Phi` as back-edges.
    pub fn topo_order(&self) -> Vec<NodeId> {
        let mut pg = petgraph::graph::DiGraph::<(), ()>::new();
        let idx: Vec<_> = (0..self.nodes.len()).map(|_| pg.add_node(())).collect();
        let full = self.petgraph();
        let scc_of = {
            let mut map = vec![usize::MAX; self.nodes.len()];
            for (i, scc) in petgraph::algo::tarjan_scc(&full).into_iter().enumerate() {
                for v in scc {
                    map[v.index()] = i;
                }
            }
            map
        };
        for e in &self.edges {
            if e.from == CONTROLLER {
                continue;
            }
            let (f, t) = (e.from.0 as usize, e.to.0 as usize);
            let into_phi = matches!(self.nodes[t].kind, NodeKind::Phi { .. });
            if into_phi && scc_of[f] == scc_of[t] {
                continue;
            }
            pg.add_edge(idx[f], idx[t], ());
        }
        petgraph::algo::toposort(&pg, None)
            .map(|order| order.into_iter().map(|v| NodeId(v.index() as u32)).collect())
            .unwrap_or_else(|_| self.node_ids().collect())
    }

    /// Hash of the full static structure; recomputed after a run to assert the
    /// graph was not mutated.
    pub fn structure_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for spec in &self.nodes {
            spec.name.hash(&mut h);
            // Kind configuration via its JSON form, which is stable and total.
            serde_json::to_string(&spec.kind).unwrap().hash(&mut h);
        }
        for e in &self.edges {
            (e.from.0, e.from_port, e.to.0, e.to_port).hash(&mut h);
        }
        for (name, e) in &self.entries {
            name.hash(&mut h);
            e.0.hash(&mut h);
        }
        h.finish()
    }
}
