//! Message states: an instance id plus a small ordered set of integer fields,
//! with optional shared per-instance structure (sequence/tree/graph layout).
//!
//! States are the routing and caching currency of the whole engine: node
//! caches are keyed by projections of the state, and the core invariant is
//! that every forward message's state comes back unchanged on the backward
//! pass.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

pub type InstanceId = i64;

/// Field tags a state can carry. The set is closed so projections stay cheap
/// and graph JSON stays readable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    /// Loop counter of a sequence recurrence.
    T,
    /// Sequence length.
    Len,
    /// Node index inside a tree or graph instance.
    Node,
    /// Parent node index inside a tree (-1 at the root).
    Parent,
    /// 1 when the tree node is the root, else 0.
    Root,
    /// Edge index inside a graph instance.
    Edge,
    /// Source node of a graph edge.
    Src,
    /// Destination node of a graph edge.
    Dst,
    /// Edge type of a graph edge.
    EdgeType,
    /// Propagation step counter of a graph recurrence.
    Step,
}

impl Field {
    pub const ALL: [Field; 10] = [
        Field::T,
        Field::Len,
        Field::Node,
        Field::Parent,
        Field::Root,
        Field::Edge,
        Field::Src,
        Field::Dst,
        Field::EdgeType,
        Field::Step,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Field::T => "t",
            Field::Len => "len",
            Field::Node => "node",
            Field::Parent => "parent",
            Field::Root => "root",
            Field::Edge => "edge",
            Field::Src => "src",
            Field::Dst => "dst",
            Field::EdgeType => "edge_type",
            Field::Step => "step",
        }
    }
}

impl std::str::FromStr for Field {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown state field `{s}`"))
    }
}

/// Immutable per-instance structure shared by every message of the instance.
///
/// Distributed by value with the instance (behind an `Arc`), never consulted
/// for routing equality: two states compare equal iff their instance and
/// fields match.
#[derive(Debug, PartialEq, Eq)]
pub enum AuxData {
    Tree(TreeAux),
    Graph(GraphAux),
}

/// Shape of a binary tree: parent pointers and the root index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeAux {
    /// `parent[v]` is `None` exactly at the root.
    pub parent: Vec<Option<u32>>,
    pub root: u32,
}

impl TreeAux {
    pub fn num_nodes(&self) -> usize {
        self.parent.len()
    }

    /// Parent of `v` as a state field value (-1 at the root).
    pub fn parent_field(&self, v: u32) -> i64 {
        self.parent[v as usize].map_or(-1, i64::from)
    }
}

/// Shape of a directed typed multigraph, with the index structures the
/// aggregation nodes consult (out-edge lists, per-type edge lists, in-degrees).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphAux {
    pub num_nodes: usize,
    pub num_edge_types: usize,
    /// `(src, dst, edge_type)` per edge; the edge id is the index.
    pub edges: Vec<(u32, u32, u32)>,
    /// Edge ids leaving each node, ascending.
    pub out_edges: Vec<Vec<u32>>,
    /// Edge ids per edge type, ascending.
    pub edges_by_type: Vec<Vec<u32>>,
    pub in_degree: Vec<u32>,
}

impl GraphAux {
    /// Builds the index structures from an edge list.
    pub fn new(num_nodes: usize, num_edge_types: usize, edges: Vec<(u32, u32, u32)>) -> Self {
        let mut out_edges = vec![Vec::new(); num_nodes];
        let mut edges_by_type = vec![Vec::new(); num_edge_types];
        let mut in_degree = vec![0u32; num_nodes];
        for (i, &(src, dst, ty)) in edges.iter().enumerate() {
            out_edges[src as usize].push(i as u32);
            edges_by_type[ty as usize].push(i as u32);
            in_degree[dst as usize] += 1;
        }
        GraphAux {
            num_nodes,
            num_edge_types,
            edges,
            out_edges,
            edges_by_type,
            in_degree,
        }
    }
}

/// State carried by every message: instance id, ordered integer fields, and
/// optional shared structure.
///
/// Equality and hashing ignore `aux` on purpose; only the scalar part takes
/// part in cache keys and the restoration invariant.
#[derive(Debug, Clone)]
pub struct State {
    pub instance: InstanceId,
    fields: SmallVec<[(Field, i64); 6]>,
    pub aux: Option<Arc<AuxData>>,
}

impl State {
    pub fn new(instance: InstanceId) -> Self {
        State {
            instance,
            fields: SmallVec::new(),
            aux: None,
        }
    }

    /// Builder-style field insert, keeping fields sorted by tag.
    pub fn with(mut self, field: Field, value: i64) -> Self {
        self.set(field, value);
        self
    }

    pub fn with_aux(mut self, aux: Arc<AuxData>) -> Self {
        self.aux = Some(aux);
        self
    }

    pub fn get(&self, field: Field) -> Option<i64> {
        self.fields
            .iter()
            .find(|(f, _)| *f == field)
            .map(|(_, v)| *v)
    }

    /// Inserts or overwrites a field.
    pub fn set(&mut self, field: Field, value: i64) {
        match self.fields.binary_search_by_key(&field, |(f, _)| *f) {
            Ok(i) => self.fields[i].1 = value,
            Err(i) => self.fields.insert(i, (field, value)),
        }
    }

    pub fn remove(&mut self, field: Field) {
        if let Ok(i) = self.fields.binary_search_by_key(&field, |(f, _)| *f) {
            self.fields.remove(i);
        }
    }

    pub fn fields(&self) -> &[(Field, i64)] {
        &self.fields
    }

    /// New state keeping only the listed fields (instance and aux retained).
    pub fn project(&self, keep: &[Field]) -> State {
        let mut out = State::new(self.instance);
        out.aux = self.aux.clone();
        for &f in keep {
            if let Some(v) = self.get(f) {
                out.set(f, v);
            }
        }
        out
    }

    /// Key over the instance and every field (ids and values interleaved):
    /// two states produce the same full key exactly when they compare equal.
    /// Used where a node emits a state its configured projection cannot
    /// recover, such as a group whose merge renames the grouped-by field.
    pub fn full_key(&self) -> Key {
        let mut parts = SmallVec::with_capacity(1 + 2 * self.fields.len());
        parts.push(self.instance);
        for &(f, v) in &self.fields {
            parts.push(f as i64);
            parts.push(v);
        }
        Key { parts }
    }

    pub fn tree_aux(&self) -> Option<&TreeAux> {
        match self.aux.as_deref() {
            Some(AuxData::Tree(t)) => Some(t),
            _ => None,
        }
    }

    pub fn graph_aux(&self) -> Option<&GraphAux> {
        match self.aux.as_deref() {
            Some(AuxData::Graph(g)) => Some(g),
            _ => None,
        }
    }
}

impl PartialEq for State {
    fn eq(&self, other: &Self) -> bool {
        self.instance == other.instance && self.fields == other.fields
    }
}

impl Eq for State {}

impl std::hash::Hash for State {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.instance.hash(state);
        self.fields.hash(state);
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{inst={}", self.instance)?;
        for (field, v) in &self.fields {
            write!(f, " {}={}", field.as_str(), v)?;
        }
        write!(f, "}}")
    }
}

/// One component of a key projection: the instance id or a named field.
///
/// Serializes as a bare string (`"instance"`, `"t"`, ...) so key projections
/// stay compact in graph JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyField {
    Instance,
    Field(Field),
}

impl KeyField {
    pub fn as_str(&self) -> &'static str {
        match self {
            KeyField::Instance => "instance",
            KeyField::Field(f) => f.as_str(),
        }
    }
}

impl Serialize for KeyField {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for KeyField {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s == "instance" {
            Ok(KeyField::Instance)
        } else {
            s.parse::<Field>()
                .map(KeyField::Field)
                .map_err(serde::de::Error::custom)
        }
    }
}

/// Named projection from a state to a compact key.
///
/// A node's cache is keyed by the projection of the message state; the same
/// projection must therefore be recoverable from the backward message, which
/// the state-restoration invariant guarantees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyFn {
    pub parts: Vec<KeyField>,
}

impl KeyFn {
    pub fn new(parts: Vec<KeyField>) -> Self {
        KeyFn { parts }
    }

    /// Key on the instance id alone.
    pub fn instance() -> Self {
        KeyFn {
            parts: vec![KeyField::Instance],
        }
    }

    /// Key on the instance id plus the given fields.
    pub fn instance_and(fields: &[Field]) -> Self {
        let mut parts = vec![KeyField::Instance];
        parts.extend(fields.iter().map(|&f| KeyField::Field(f)));
        KeyFn { parts }
    }

    /// Projects the state, failing if a required field is absent.
    pub fn key_of(&self, state: &State) -> Result<Key, MissingField> {
        let mut parts = SmallVec::with_capacity(self.parts.len());
        for kf in &self.parts {
            match kf {
                KeyField::Instance => parts.push(state.instance),
                KeyField::Field(f) => {
                    parts.push(state.get(*f).ok_or(MissingField { field: *f })?)
                }
            }
        }
        Ok(Key { parts })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("state is missing field `{}` required by a key projection", field.as_str())]
pub struct MissingField {
    pub field: Field,
}

/// Compact projected key used for cache lookups.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Key {
    parts: SmallVec<[i64; 4]>,
}

impl Key {
    /// Byte view of the key (little-endian concatenation of the parts).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.parts.len() * 8);
        for p in &self.parts {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn parts(&self) -> &[i64] {
        &self.parts
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, p) in self.parts.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{p}")?;
        }
        write!(f, "]")
    }
}
