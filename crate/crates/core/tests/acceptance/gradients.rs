//! Criterion 1: every parameter gradient of all four model families matches
//! central finite differences in double precision, relative error < 1e-5.

use driftnet::data::{GraphInstance, TreeInstance, GRAPH_CLASSES, GRAPH_VOCAB, LIST_CLASSES, LIST_VOCAB};
use driftnet::gradcheck::{check_gradients, DEFAULT_EPSILON};
use driftnet::models::{build_model, pump_ggsnn, pump_mlp, pump_rnn, pump_tree, ModelSpec};
use driftnet::runtime::InstancePump;
use driftnet::tensor::Tensor;

use crate::{Env, Verdict};

const TOLERANCE: f64 = 1e-5;

fn mlp_case() -> (&'static str, ModelSpec, InstancePump) {
    let spec = ModelSpec::Mlp {
        input: 20,
        hidden: 16,
        classes: 4,
    };
    let x: Vec<f64> = (0..20).map(|i| (0.37 * (i * i + 3) as f64).sin()).collect();
    let pump = pump_mlp(0, &Tensor::new(1, 20, x).unwrap(), 2);
    ("mlp 20->16->16->16->4", spec, pump)
}

fn rnn_case() -> (&'static str, ModelSpec, InstancePump) {
    let spec = ModelSpec::Rnn {
        vocab: LIST_VOCAB,
        embed: 8,
        hidden: 16,
        classes: LIST_CLASSES,
    };
    let pump = pump_rnn(0, &[12, 3, 0, 7], 16, 5);
    ("rnn h=16 len=4", spec, pump)
}

fn tree_case() -> (&'static str, ModelSpec, InstancePump) {
    let spec = ModelSpec::TreeRnn {
        vocab: 10,
        hidden: 8,
        classes: 5,
    };
    // Three leaves: node 1 under the root, nodes 3 and 4 under node 2.
    let tree = TreeInstance {
        parent: vec![None, Some(0), Some(0), Some(2), Some(2)],
        tokens: vec![None, Some(3), None, Some(1), Some(4)],
        labels: vec![3, 3, 3, 1, 4],
        root: 0,
    };
    assert_eq!(tree.leaves().len(), 3);
    let pump = pump_tree(0, &tree);
    ("tree-rnn h=8 3 leaves", spec, pump)
}

fn ggsnn_case() -> (&'static str, ModelSpec, InstancePump) {
    let spec = ModelSpec::Ggsnn {
        vocab: GRAPH_VOCAB,
        hidden: 5,
        edge_types: 4,
        steps: 2,
        classes: GRAPH_CLASSES,
    };
    // Four nodes, every node with in- and out-degree >= 1, all edge types.
    let g = GraphInstance {
        num_nodes: 4,
        num_edge_types: 4,
        annotations: vec![1, 2, 5, 0],
        edges: vec![(0, 1, 0), (1, 0, 2), (1, 2, 1), (2, 1, 3), (2, 3, 0), (3, 2, 2)],
        query: 2,
        label: 1,
    };
    let pump = pump_ggsnn(0, &g);
    ("ggsnn h=5 4 nodes 2 steps", spec, pump)
}

pub fn run(_env: &Env) -> Verdict {
    let started = std::time::Instant::now();
    let cases = [mlp_case(), rnn_case(), tree_case(), ggsnn_case()];
    let mut elements = 0;
    let mut worst: f64 = 0.0;
    for (label, spec, pump) in cases {
        let graph = match build_model(&spec) {
            Ok(g) => g,
            Err(errs) => return Verdict::Fail(format!("{label}: graph build failed: {errs:?}")),
        };
        let report = match check_gradients(graph, &pump, 11, DEFAULT_EPSILON, TOLERANCE) {
            Ok(r) => r,
            Err(e) => return Verdict::Fail(format!("{label}: {e}")),
        };
        if !report.passed() {
            return Verdict::Fail(format!("{label}: worst block\n{report}"));
        }
        elements += report.elements();
        worst = worst.max(report.max_rel_err());
    }
    Verdict::Pass(format!(
        "4 model families, {elements} parameter elements, max rel err {worst:.2e} < {TOLERANCE:.0e}"
    ))
}
