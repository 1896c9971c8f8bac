//! Parameter replication: rewriting one parameterized node into a routing
//! Cond, `k` replicas, and a joining Phi, plus the end-of-epoch averaging
//! group derived from the replica names.

use std::collections::HashMap;

use crate::ir::graph::{GraphBuilder, NodeId, NodeKind, Predicate, CONTROLLER};
use crate::ir::IrGraph;
use crate::runtime::RuntimeError;

/// Nodes whose parameters represent one logical block and are averaged
/// (including optimizer slots) whenever the runtime quiesces at an epoch
/// boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaGroup {
    pub base: String,
    pub members: Vec<NodeId>,
}

/// Finds replica groups by the `base@r<i>` naming convention the rewrite
/// uses. Works on any graph, so a deserialized graph with replicas in it
/// syncs exactly like a freshly rewritten one.
pub fn derive_replica_groups(graph: &IrGraph) -> Vec<ReplicaGroup> {
    let mut groups: HashMap<String, Vec<(usize, NodeId)>> = HashMap::new();
    for id in graph.node_ids() {
        let spec = graph.node(id);
        if !spec.kind.is_parameterized() {
            continue;
        }
        if let Some((base, idx)) = spec.name.rsplit_once("@r") {
            if let Ok(i) = idx.parse::<usize>() {
                groups.entry(base.to_string()).or_default().push((i, id));
            }
        }
    }
    let mut out: Vec<ReplicaGroup> = groups
        .into_iter()
        .filter(|(_, members)| members.len() > 1)
        .map(|(base, mut members)| {
            members.sort();
            ReplicaGroup {
                base,
                members: members.into_iter().map(|(_, id)| id).collect(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.base.cmp(&b.base));
    out
}

/// Replaces the parameterized node `name` with `Cond -> k replicas -> Phi`.
/// The Cond spreads traffic round-robin by the node's cache key (sum of the
/// key parts modulo `k`), so each replica sees a disjoint slice of keys; the
/// Phi restores a single dataflow path. Entry points and all other nodes are
/// preserved under their original names.
pub fn build_replicated(graph: &IrGraph, name: &str, k: usize) -> Result<IrGraph, RuntimeError> {
    if k == 0 {
        return Err(RuntimeError::Config("replica count must be at least 1".into()));
    }
    let target = graph.node_id(name)?;
    let spec = graph.node(target);
    let key = match &spec.kind {
        NodeKind::Linear { key, .. } | NodeKind::Lookup { key, .. } | NodeKind::GruCell { key, .. } => {
            key.clone()
        }
        other => {
            return Err(RuntimeError::Config(format!(
                "cannot replicate `{name}`: {} carries no parameters",
                other.op_name()
            )))
        }
    };
    if name.rsplit_once("@r").is_some_and(|(_, i)| i.parse::<usize>().is_ok()) {
        return Err(RuntimeError::Config(format!(
            "`{name}` is already a replica"
        )));
    }

    let mut b = GraphBuilder::new();
    let mut map: HashMap<NodeId, NodeId> = HashMap::new();
    let mut cond = None;
    let mut phi = None;
    for id in graph.node_ids() {
        let spec = graph.node(id);
        if id == target {
            let c = b.node(
                format!("{name}@cond"),
                NodeKind::Cond {
                    predicate: Predicate::SumMod {
                        parts: key.parts.clone(),
                        arity: k,
                    },
                },
            );
            let mut replicas = Vec::with_capacity(k);
            for i in 0..k {
                replicas.push(b.node(format!("{name}@r{i}"), spec.kind.clone()));
            }
            let p = b.node(format!("{name}@phi"), NodeKind::Phi { key: key.clone() });
            for (i, &r) in replicas.iter().enumerate() {
                b.edge(c, i as u16, r, 0);
                b.edge(r, 0, p, i as u16);
            }
            cond = Some(c);
            phi = Some(p);
        } else {
            map.insert(id, b.node(spec.name.clone(), spec.kind.clone()));
        }
    }
    let (cond, phi) = (cond.unwrap(), phi.unwrap());
    let resolve = |id: NodeId, incoming: bool| {
        if id == target {
            if incoming {
                cond
            } else {
                phi
            }
        } else {
            map[&id]
        }
    };
    let mut entry_edges: HashMap<u32, &str> = HashMap::new();
    for (entry_name, e) in graph.entries() {
        entry_edges.insert(e.0, entry_name);
    }
    for (i, e) in graph.edges().iter().enumerate() {
        if e.from == CONTROLLER {
            let entry_name = entry_edges[&(i as u32)];
            b.entry(entry_name, resolve(e.to, true), e.to_port);
        } else {
            b.edge(
                resolve(e.from, false),
                e.from_port,
                resolve(e.to, true),
                e.to_port,
            );
        }
    }
    b.build().map_err(|errs| {
        RuntimeError::Config(format!(
            "replicating `{name}` produced an invalid graph: {errs:?}"
        ))
    })
}
