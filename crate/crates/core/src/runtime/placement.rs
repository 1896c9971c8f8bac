//! Assignment of graph nodes to workers.

use std::collections::HashMap;

use crate::ir::graph::{NodeId, CONTROLLER};
use crate::ir::IrGraph;
use crate::runtime::RuntimeError;

/// Maps every node to the worker that hosts it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    workers: usize,
    of: Vec<usize>,
}

impl Placement {
    pub fn new(graph: &IrGraph, workers: usize, of: Vec<usize>) -> Result<Self, RuntimeError> {
        if workers == 0 {
            return Err(RuntimeError::Config("at least one worker is required".into()));
        }
        if of.len() != graph.node_count() {
            return Err(RuntimeError::PlacementSize {
                got: of.len(),
                want: graph.node_count(),
            });
        }
        for (i, &w) in of.iter().enumerate() {
            if w >= workers {
                return Err(RuntimeError::PlacementRange {
                    node: graph.name(NodeId(i as u32)).to_string(),
                    worker: w,
                    workers,
                });
            }
        }
        Ok(Placement { workers, of })
    }

    /// Placement from `node name -> worker` pairs; every node must appear.
    pub fn from_names(
        graph: &IrGraph,
        workers: usize,
        map: &HashMap<String, usize>,
    ) -> Result<Self, RuntimeError> {
        let mut of = Vec::with_capacity(graph.node_count());
        for id in graph.node_ids() {
            let name = graph.name(id);
            match map.get(name) {
                Some(&w) => of.push(w),
                None => {
                    return Err(RuntimeError::Config(format!(
                        "placement map does not assign node `{name}`"
                    )))
                }
            }
        }
        Placement::new(graph, workers, of)
    }

    /// Default heuristic: every parameterized node gets its own worker
    /// round-robin; everything else joins an already-placed neighbor
    /// (preferring its upstream producer, so emissions tend to stay local).
    pub fn default_for(graph: &IrGraph, workers: usize) -> Result<Self, RuntimeError> {
        if workers == 0 {
            return Err(RuntimeError::Config("at least one worker is required".into()));
        }
        let n = graph.node_count();
        let mut of = vec![usize::MAX; n];
        let order = graph.topo_order();
        let mut next = 0usize;
        for &id in &order {
            if graph.node(id).kind.is_parameterized() {
                of[id.0 as usize] = next % workers;
                next += 1;
            }
        }
        loop {
            let mut changed = false;
            for &id in &order {
                if of[id.0 as usize] != usize::MAX {
                    continue;
                }
                let upstream = graph
                    .in_edges(id)
                    .iter()
                    .map(|&e| graph.edge(e).from)
                    .filter(|&s| s != CONTROLLER)
                    .find(|s| of[s.0 as usize] != usize::MAX);
                let downstream = graph
                    .out_edges(id)
                    .iter()
                    .map(|&e| graph.edge(e).to)
                    .find(|s| of[s.0 as usize] != usize::MAX);
                if let Some(nb) = upstream.or(downstream) {
                    of[id.0 as usize] = of[nb.0 as usize];
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        for w in &mut of {
            if *w == usize::MAX {
                *w = 0;
            }
        }
        Placement::new(graph, workers, of)
    }

    /// Everything on one worker.
    pub fn single(graph: &IrGraph) -> Self {
        Placement {
            workers: 1,
            of: vec![0; graph.node_count()],
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn of(&self, node: NodeId) -> usize {
        self.of[node.0 as usize]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.of
    }
}
