//! JSON document form of a graph: nodes by name, edges by name, controller
//! entries. Round-trips losslessly with [`IrGraph`] so built-in model graphs
//! can be exported, diffed against checked-in goldens, and loaded back.

use serde::{Deserialize, Serialize};

use crate::ir::graph::{GraphBuilder, GraphError, IrGraph, NodeKind, Port, CONTROLLER};

fn is_zero(p: &Port) -> bool {
    *p == 0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDoc {
    pub name: String,
    #[serde(flatten)]
    pub kind: NodeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeDoc {
    pub from: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub from_port: Port,
    pub to: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub to_port: Port,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryDoc {
    pub name: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub to_port: Port,
}

/// Serializable graph document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    pub nodes: Vec<NodeDoc>,
    pub edges: Vec<EdgeDoc>,
    pub entries: Vec<EntryDoc>,
}

impl GraphDoc {
    pub fn from_graph(graph: &IrGraph) -> GraphDoc {
        let nodes = graph
            .node_ids()
            .map(|id| {
                let spec = graph.node(id);
                NodeDoc {
                    name: spec.name.clone(),
                    kind: spec.kind.clone(),
                }
            })
            .collect();
        let mut edges = Vec::new();
        for e in graph.edges() {
            if e.from == CONTROLLER {
                continue;
            }
            edges.push(EdgeDoc {
                from: graph.name(e.from).to_string(),
                from_port: e.from_port,
                to: graph.name(e.to).to_string(),
                to_port: e.to_port,
            });
        }
        let entries = graph
            .entries()
            .iter()
            .map(|(name, eid)| {
                let e = graph.edge(*eid);
                EntryDoc {
                    name: name.clone(),
                    to: graph.name(e.to).to_string(),
                    to_port: e.to_port,
                }
            })
            .collect();
        GraphDoc {
            nodes,
            edges,
            entries,
        }
    }

    pub fn into_graph(self) -> Result<IrGraph, Vec<GraphError>> {
        let mut b = GraphBuilder::new();
        let mut ids = std::collections::HashMap::new();
        for n in self.nodes {
            let id = b.node(n.name.clone(), n.kind);
            ids.insert(n.name, id);
        }
        let resolve = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| vec![GraphError::UnknownName(name.to_string())])
        };
        for e in &self.edges {
            b.edge(resolve(&e.from)?, e.from_port, resolve(&e.to)?, e.to_port);
        }
        for en in &self.entries {
            b.entry(en.name.clone(), resolve(&en.to)?, en.to_port);
        }
        b.build()
    }

    pub fn to_json_pretty(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("graph docs always serialize");
        out.push('\n');
        out
    }

    pub fn from_json(s: &str) -> Result<GraphDoc, serde_json::Error> {
        serde_json::from_str(s)
    }
}
