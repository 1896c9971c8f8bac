//! Graph builders for the four built-in model families, plus the pump plans
//! that feed instances to them.
//!
//! Each builder returns a validated graph whose dynamic control flow (loops
//! over time, recursion over trees, iteration over graph neighborhoods) is
//! encoded statically with `Cond`/`Phi`/`Isu` and the aggregation nodes; the
//! per-instance shape lives entirely in message states.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{GraphInstance, TreeInstance};
use crate::ir::graph::{
    FanoutGen, GraphBuilder, GraphError, GroupExpect, LossKind, MergeRule, NodeKind, Predicate,
    RowGen, StateUpdate,
};
use crate::ir::state::{AuxData, Field, KeyFn, State};
use crate::ir::IrGraph;
use crate::runtime::InstancePump;
use crate::tensor::{Activation, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Four dense layers with inner ReLUs, ending in a softmax loss.
    Mlp {
        input: usize,
        hidden: usize,
        classes: usize,
    },
    /// Token-level recurrence: embed, concat with the hidden state, one dense
    /// cell, looped until the sequence ends, then a dense readout.
    Rnn {
        vocab: usize,
        embed: usize,
        hidden: usize,
        classes: usize,
    },
    /// Recursion over binary trees: embedded leaves climb toward the root,
    /// siblings joining through a dense composition cell.
    TreeRnn {
        vocab: usize,
        hidden: usize,
        classes: usize,
    },
    /// Gated graph network: per-edge-type linear propagation aggregated per
    /// target node, fed through a GRU, iterated `steps` times, then pooled.
    Ggsnn {
        vocab: usize,
        hidden: usize,
        edge_types: usize,
        steps: usize,
        classes: usize,
    },
}

impl ModelSpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            ModelSpec::Mlp { .. } => "mlp",
            ModelSpec::Rnn { .. } => "rnn",
            ModelSpec::TreeRnn { .. } => "tree_rnn",
            ModelSpec::Ggsnn { .. } => "ggsnn",
        }
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<IrGraph, Vec<GraphError>> {
    match *spec {
        ModelSpec::Mlp {
            input,
            hidden,
            classes,
        } => build_mlp(input, hidden, classes),
        ModelSpec::Rnn {
            vocab,
            embed,
            hidden,
            classes,
        } => build_rnn(vocab, embed, hidden, classes),
        ModelSpec::TreeRnn {
            vocab,
            hidden,
            classes,
        } => build_tree_rnn(vocab, hidden, classes),
        ModelSpec::Ggsnn {
            vocab,
            hidden,
            edge_types,
            steps,
            classes,
        } => build_ggsnn(vocab, hidden, edge_types, steps, classes),
    }
}

fn build_mlp(input: usize, hidden: usize, classes: usize) -> Result<IrGraph, Vec<GraphError>> {
    let mut b = GraphBuilder::new();
    let key = KeyFn::instance;
    let dims = [input, hidden, hidden, hidden, classes];
    let mut prev = None;
    for i in 0..4 {
        let fc = b.node(
            format!("fc{}", i + 1),
            NodeKind::Linear {
                input: dims[i],
                output: dims[i + 1],
                key: key(),
            },
        );
        if let Some(p) = prev {
            b.simple_edge(p, fc);
        } else {
            b.entry("x", fc, 0);
        }
        prev = Some(if i < 3 {
            let relu = b.node(
                format!("relu{}", i + 1),
                NodeKind::Activation {
                    f: Activation::Relu,
                    key: key(),
                },
            );
            b.simple_edge(fc, relu);
            relu
        } else {
            fc
        });
    }
    let loss = b.node(
        "loss",
        NodeKind::Loss {
            loss: LossKind::SoftmaxCrossEntropy,
            key: key(),
        },
    );
    b.edge(prev.unwrap(), 0, loss, 0);
    b.entry("y", loss, 1);
    b.build()
}

fn build_rnn(
    vocab: usize,
    embed: usize,
    hidden: usize,
    classes: usize,
) -> Result<IrGraph, Vec<GraphError>> {
    let mut b = GraphBuilder::new();
    let step_key = || KeyFn::instance_and(&[Field::T]);
    let embed_n = b.node(
        "embed",
        NodeKind::Lookup {
            vocab,
            dim: embed,
            key: step_key(),
        },
    );
    let carry = b.node("carry", NodeKind::Phi { key: step_key() });
    let join = b.node(
        "join",
        NodeKind::Concat {
            key: step_key(),
            inputs: 2,
        },
    );
    let cell = b.node(
        "cell",
        NodeKind::Linear {
            input: embed + hidden,
            output: hidden,
            key: step_key(),
        },
    );
    let act = b.node(
        "act",
        NodeKind::Activation {
            f: Activation::Relu,
            key: step_key(),
        },
    );
    let tick = b.node(
        "tick",
        NodeKind::Isu {
            update: StateUpdate::AddConst {
                field: Field::T,
                delta: 1,
            },
        },
    );
    let more = b.node(
        "more",
        NodeKind::Cond {
            predicate: Predicate::FieldLtField {
                a: Field::T,
                b: Field::Len,
            },
        },
    );
    let readout = b.node(
        "readout",
        NodeKind::Linear {
            input: hidden,
            output: classes,
            key: KeyFn::instance(),
        },
    );
    let loss = b.node(
        "loss",
        NodeKind::Loss {
            loss: LossKind::SoftmaxCrossEntropy,
            key: KeyFn::instance(),
        },
    );
    b.edge(embed_n, 0, join, 0);
    b.edge(carry, 0, join, 1);
    b.simple_edge(join, cell);
    b.simple_edge(cell, act);
    b.simple_edge(act, tick);
    b.simple_edge(tick, more);
    b.edge(more, 0, carry, 1);
    b.edge(more, 1, readout, 0);
    b.edge(readout, 0, loss, 0);
    b.entry("tok", embed_n, 0);
    b.entry("h0", carry, 0);
    b.entry("y", loss, 1);
    b.build()
}

fn build_tree_rnn(
    vocab: usize,
    hidden: usize,
    classes: usize,
) -> Result<IrGraph, Vec<GraphError>> {
    let mut b = GraphBuilder::new();
    let node_key = || KeyFn::instance_and(&[Field::Node]);
    let embed = b.node(
        "embed",
        NodeKind::Lookup {
            vocab,
            dim: hidden,
            key: node_key(),
        },
    );
    let gate = b.node("gate", NodeKind::Phi { key: node_key() });
    let done = b.node(
        "done",
        NodeKind::Cond {
            predicate: Predicate::FieldEqConst {
                field: Field::Root,
                value: 1,
            },
        },
    );
    let siblings = b.node(
        "siblings",
        NodeKind::Group {
            key: KeyFn::instance_and(&[Field::Parent]),
            expect: GroupExpect::Const { n: 2 },
            merge: MergeRule::TreeParent,
            order_by: Field::Node,
        },
    );
    let flatten = b.node("flatten", NodeKind::FlattenRows { rows: 2 });
    let compose = b.node(
        "compose",
        NodeKind::Linear {
            input: 2 * hidden,
            output: hidden,
            key: node_key(),
        },
    );
    let squash = b.node(
        "squash",
        NodeKind::Activation {
            f: Activation::Tanh,
            key: node_key(),
        },
    );
    let readout = b.node(
        "readout",
        NodeKind::Linear {
            input: hidden,
            output: classes,
            key: KeyFn::instance(),
        },
    );
    let loss = b.node(
        "loss",
        NodeKind::Loss {
            loss: LossKind::SoftmaxCrossEntropy,
            key: KeyFn::instance(),
        },
    );
    b.edge(embed, 0, gate, 0);
    b.simple_edge(gate, done);
    b.edge(done, 0, readout, 0);
    b.edge(done, 1, siblings, 0);
    b.simple_edge(siblings, flatten);
    b.simple_edge(flatten, compose);
    b.simple_edge(compose, squash);
    b.edge(squash, 0, gate, 1);
    b.edge(readout, 0, loss, 0);
    b.entry("leaf", embed, 0);
    b.entry("y", loss, 1);
    b.build()
}

fn build_ggsnn(
    vocab: usize,
    hidden: usize,
    edge_types: usize,
    steps: usize,
    classes: usize,
) -> Result<IrGraph, Vec<GraphError>> {
    let mut b = GraphBuilder::new();
    let step_key = || KeyFn::instance_and(&[Field::Step]);
    let embed = b.node(
        "embed",
        NodeKind::Lookup {
            vocab,
            dim: hidden,
            key: KeyFn::instance(),
        },
    );
    let carry = b.node("carry", NodeKind::Phi { key: step_key() });
    let fan = b.node(
        "fan",
        NodeKind::Bcast {
            key: step_key(),
            fanout: 2,
        },
    );
    let pernode = b.node(
        "pernode",
        NodeKind::Ungroup {
            key: step_key(),
            gen: RowGen::NodesOfInstance {
                keep: vec![Field::Step],
            },
        },
    );
    let edges = b.node(
        "edges",
        NodeKind::Flatmap {
            key: KeyFn::instance_and(&[Field::Node, Field::Step]),
            gen: FanoutGen::OutEdgesOfNode {
                keep: vec![Field::Node, Field::Step],
            },
        },
    );
    let bytype = b.node(
        "bytype",
        NodeKind::Group {
            key: KeyFn::instance_and(&[Field::EdgeType, Field::Step]),
            expect: GroupExpect::EdgesOfType,
            merge: MergeRule::Project {
                keep: vec![Field::EdgeType, Field::Step],
            },
            order_by: Field::Edge,
        },
    );
    let route = b.node(
        "route",
        NodeKind::Cond {
            predicate: Predicate::PortOfField {
                field: Field::EdgeType,
                arity: edge_types,
            },
        },
    );
    let merge = b.node(
        "merge",
        NodeKind::Phi {
            key: KeyFn::instance_and(&[Field::EdgeType, Field::Step]),
        },
    );
    for t in 0..edge_types {
        let prop = b.node(
            format!("prop{t}"),
            NodeKind::Linear {
                input: hidden,
                output: hidden,
                key: KeyFn::instance_and(&[Field::EdgeType, Field::Step]),
            },
        );
        b.edge(route, t as u16, prop, 0);
        b.edge(prop, 0, merge, t as u16);
    }
    let peredge = b.node(
        "peredge",
        NodeKind::Ungroup {
            key: KeyFn::instance_and(&[Field::EdgeType, Field::Step]),
            gen: RowGen::EdgesOfType {
                keep: vec![Field::Step],
            },
        },
    );
    let bydst = b.node(
        "bydst",
        NodeKind::Group {
            key: KeyFn::instance_and(&[Field::Dst, Field::Step]),
            expect: GroupExpect::InDegreeOfDst,
            merge: MergeRule::ProjectRename {
                keep: vec![Field::Step],
                from: Field::Dst,
                to: Field::Node,
            },
            order_by: Field::Edge,
        },
    );
    let inbox = b.node(
        "inbox",
        NodeKind::SumRows {
            key: KeyFn::instance_and(&[Field::Node, Field::Step]),
        },
    );
    let nodes = b.node(
        "nodes",
        NodeKind::Group {
            key: step_key(),
            expect: GroupExpect::NodesOfInstance,
            merge: MergeRule::Project {
                keep: vec![Field::Step],
            },
            order_by: Field::Node,
        },
    );
    let join = b.node(
        "join",
        NodeKind::Concat {
            key: step_key(),
            inputs: 2,
        },
    );
    let gru = b.node(
        "gru",
        NodeKind::GruCell {
            dim: hidden,
            key: step_key(),
        },
    );
    let tick = b.node(
        "tick",
        NodeKind::Isu {
            update: StateUpdate::AddConst {
                field: Field::Step,
                delta: 1,
            },
        },
    );
    let more = b.node(
        "more",
        NodeKind::Cond {
            predicate: Predicate::FieldLtConst {
                field: Field::Step,
                value: steps as i64,
            },
        },
    );
    let pool = b.node(
        "pool",
        NodeKind::SumRows {
            key: KeyFn::instance(),
        },
    );
    let readout = b.node(
        "readout",
        NodeKind::Linear {
            input: hidden,
            output: classes,
            key: KeyFn::instance(),
        },
    );
    let loss = b.node(
        "loss",
        NodeKind::Loss {
            loss: LossKind::SoftmaxCrossEntropy,
            key: KeyFn::instance(),
        },
    );
    b.edge(embed, 0, carry, 0);
    b.simple_edge(carry, fan);
    b.edge(fan, 0, pernode, 0);
    b.edge(fan, 1, join, 1);
    b.simple_edge(pernode, edges);
    b.simple_edge(edges, bytype);
    b.simple_edge(bytype, route);
    b.simple_edge(merge, peredge);
    b.simple_edge(peredge, bydst);
    b.simple_edge(bydst, inbox);
    b.simple_edge(inbox, nodes);
    b.edge(nodes, 0, join, 0);
    b.simple_edge(join, gru);
    b.simple_edge(gru, tick);
    b.simple_edge(tick, more);
    b.edge(more, 0, carry, 1);
    b.edge(more, 1, pool, 0);
    b.simple_edge(pool, readout);
    b.edge(readout, 0, loss, 0);
    b.entry("x", embed, 0);
    b.entry("y", loss, 1);
    b.build()
}

fn label_tensor(label: usize) -> Tensor {
    Tensor::scalar(label as Scalar).unwrap()
}

pub fn pump_mlp(instance: i64, x: &Tensor, label: usize) -> InstancePump {
    InstancePump {
        instance,
        messages: vec![
            ("x".into(), x.clone(), State::new(instance)),
            ("y".into(), label_tensor(label), State::new(instance)),
        ],
    }
}

pub fn pump_rnn(instance: i64, tokens: &[usize], hidden: usize, label: usize) -> InstancePump {
    assert!(!tokens.is_empty());
    let len = tokens.len() as i64;
    let mut messages = Vec::with_capacity(tokens.len() + 2);
    for (t, &tok) in tokens.iter().enumerate() {
        let state = State::new(instance)
            .with(Field::T, t as i64)
            .with(Field::Len, len);
        messages.push((
            "tok".to_string(),
            Tensor::new(1, 1, vec![tok as Scalar]).unwrap(),
            state,
        ));
    }
    let h0 = State::new(instance)
        .with(Field::T, 0)
        .with(Field::Len, len);
    messages.push(("h0".into(), Tensor::zeros(1, hidden), h0));
    messages.push(("y".into(), label_tensor(label), State::new(instance)));
    InstancePump { instance, messages }
}

pub fn pump_tree(instance: i64, tree: &TreeInstance) -> InstancePump {
    let aux = Arc::new(AuxData::Tree(tree.aux()));
    let mut messages = Vec::new();
    for leaf in tree.leaves() {
        let parent = tree.parent[leaf as usize].map_or(-1, i64::from);
        let state = State::new(instance)
            .with(Field::Node, leaf as i64)
            .with(Field::Parent, parent)
            .with(Field::Root, (leaf == tree.root) as i64)
            .with_aux(aux.clone());
        let token = tree.tokens[leaf as usize].unwrap();
        messages.push((
            "leaf".to_string(),
            Tensor::new(1, 1, vec![token as Scalar]).unwrap(),
            state,
        ));
    }
    messages.push((
        "y".into(),
        label_tensor(tree.root_label() as usize),
        State::new(instance),
    ));
    InstancePump { instance, messages }
}

pub fn pump_ggsnn(instance: i64, g: &GraphInstance) -> InstancePump {
    let aux = Arc::new(AuxData::Graph(g.aux()));
    let x = State::new(instance).with(Field::Step, 0).with_aux(aux);
    InstancePump {
        instance,
        messages: vec![
            ("x".into(), g.annotation_row(), x),
            ("y".into(), label_tensor(g.label), State::new(instance)),
        ],
    }
}
