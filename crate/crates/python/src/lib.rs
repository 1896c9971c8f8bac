//! Python bindings: build model graphs, pump instances, train and evaluate
//! with the asynchronous engine, and run gradient checks.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::collections::BTreeMap;

use driftnet::data;
use driftnet::ir::schema::GraphDoc;
use driftnet::models::{self, ModelSpec};
use driftnet::optim::OptimizerKind;
use driftnet::runtime::{build_replicated, EngineConfig, EpochReport, InstancePump};
use driftnet::tensor::Tensor;

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A static IR graph for one model.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Graph {
    inner: driftnet::ir::IrGraph,
}

fn build(spec: ModelSpec) -> PyResult<Graph> {
    models::build_model(&spec)
        .map(|inner| Graph { inner })
        .map_err(|errs| {
            value_err(
                errs.iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        })
}

#[pymethods]
impl Graph {
    #[staticmethod]
    fn mlp(input: usize, hidden: usize, classes: usize) -> PyResult<Graph> {
        build(ModelSpec::Mlp {
            input,
            hidden,
            classes,
        })
    }

    #[staticmethod]
    fn rnn(vocab: usize, embed: usize, hidden: usize, classes: usize) -> PyResult<Graph> {
        build(ModelSpec::Rnn {
            vocab,
            embed,
            hidden,
            classes,
        })
    }

    #[staticmethod]
    fn tree_rnn(vocab: usize, hidden: usize, classes: usize) -> PyResult<Graph> {
        build(ModelSpec::TreeRnn {
            vocab,
            hidden,
            classes,
        })
    }

    #[staticmethod]
    fn ggsnn(
        vocab: usize,
        hidden: usize,
        edge_types: usize,
        steps: usize,
        classes: usize,
    ) -> PyResult<Graph> {
        build(ModelSpec::Ggsnn {
            vocab,
            hidden,
            edge_types,
            steps,
            classes,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Graph> {
        let doc = GraphDoc::from_json(text).map_err(value_err)?;
        doc.into_graph()
            .map(|inner| Graph { inner })
            .map_err(|errs| {
                value_err(
                    errs.iter()
                        .map(|e| e.to_string())
                        .collect::<Vec<_>>()
                        .join("; "),
                )
            })
    }

    fn to_json(&self) -> String {
        GraphDoc::from_graph(&self.inner).to_json_pretty()
    }

    fn node_names(&self) -> Vec<String> {
        self.inner
            .node_ids()
            .map(|id| self.inner.name(id).to_string())
            .collect()
    }

    /// A copy of this graph with `name` replaced by `k` routed replicas.
    fn replicate(&self, name: &str, k: usize) -> PyResult<Graph> {
        build_replicated(&self.inner, name, k)
            .map(|inner| Graph { inner })
            .map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!("Graph({} nodes)", self.inner.node_count())
    }
}

/// Everything the controller feeds into the graph for one instance.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Pump {
    inner: InstancePump,
}

#[pymethods]
impl Pump {
    #[getter]
    fn instance(&self) -> i64 {
        self.inner.instance
    }

    fn __repr__(&self) -> String {
        format!(
            "Pump(instance={}, messages={})",
            self.inner.instance,
            self.inner.messages.len()
        )
    }
}

#[pyfunction]
fn mlp_pump(instance: i64, x: Vec<f64>, label: usize) -> PyResult<Pump> {
    let t = Tensor::new(1, x.len(), x).map_err(value_err)?;
    Ok(Pump {
        inner: models::pump_mlp(instance, &t, label),
    })
}

#[pyfunction]
fn rnn_pump(instance: i64, tokens: Vec<usize>, hidden: usize, label: usize) -> PyResult<Pump> {
    if tokens.is_empty() {
        return Err(value_err("tokens must be non-empty"));
    }
    Ok(Pump {
        inner: models::pump_rnn(instance, &tokens, hidden, label),
    })
}

/// A labeled binary tree with tokens at the leaves.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct TreeSample {
    inner: data::TreeInstance,
}

#[pymethods]
impl TreeSample {
    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn root_label(&self) -> u8 {
        self.inner.root_label()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels.clone()
    }

    fn pump(&self, instance: i64) -> Pump {
        Pump {
            inner: models::pump_tree(instance, &self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "TreeSample(nodes={}, root_label={})",
            self.inner.num_nodes(),
            self.inner.root_label()
        )
    }
}

/// A typed-edge graph with node annotations, a query, and a label.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct GraphSample {
    inner: data::GraphInstance,
}

#[pymethods]
impl GraphSample {
    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    #[getter]
    fn edges(&self) -> Vec<(u32, u32, u32)> {
        self.inner.edges.clone()
    }

    fn pump(&self, instance: i64) -> Pump {
        Pump {
            inner: models::pump_ggsnn(instance, &self.inner),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "GraphSample(nodes={}, edges={}, label={})",
            self.inner.num_nodes,
            self.inner.edges.len(),
            self.inner.label
        )
    }
}

/// `(tokens, label)` pairs for the digit-sequence reduction task.
#[pyfunction]
fn gen_list_reduction(n: usize, seed: u64) -> Vec<(Vec<usize>, u8)> {
    data::gen_list_reduction(n, seed)
        .iter()
        .map(|i| (i.tokens(), i.label))
        .collect()
}

#[pyfunction]
fn gen_trees(
    n: usize,
    depth_min: usize,
    depth_max: usize,
    vocab: usize,
    seed: u64,
) -> Vec<TreeSample> {
    data::gen_trees(n, (depth_min, depth_max), vocab, seed)
        .into_iter()
        .map(|inner| TreeSample { inner })
        .collect()
}

#[pyfunction]
fn gen_two_hop(n: usize, nodes: usize, seed: u64) -> Vec<GraphSample> {
    data::gen_two_hop_deduction(n, nodes, seed)
        .into_iter()
        .map(|inner| GraphSample { inner })
        .collect()
}

fn optimizer_of(name: &str, lr: f64, momentum: f64) -> PyResult<OptimizerKind> {
    match name {
        "sgd" => Ok(OptimizerKind::sgd(lr)),
        "momentum" => Ok(OptimizerKind::momentum(lr, momentum)),
        "adam" => Ok(OptimizerKind::adam(lr)),
        other => Err(value_err(format!(
            "unknown optimizer `{other}` (expected sgd, momentum, or adam)"
        ))),
    }
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(value_err("ragged parameter matrix"));
    }
    Tensor::new(r, c, rows.into_iter().flatten().collect()).map_err(value_err)
}

fn report_dict<'py>(py: Python<'py>, r: &EpochReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("instances", r.instances)?;
    d.set_item("wall_s", r.wall.as_secs_f64())?;
    d.set_item("mean_loss", r.loss.mean_loss())?;
    d.set_item("accuracy", r.loss.accuracy())?;
    d.set_item("inst_per_s", r.instances_per_sec())?;
    d.set_item("mean_staleness", r.staleness.mean())?;
    d.set_item("max_staleness", r.staleness.max)?;
    d.set_item("updates", r.updates)?;
    d.set_item("messages_processed", r.messages_processed)?;
    d.set_item("skipped_non_finite", r.skipped_non_finite)?;
    d.set_item("max_active_observed", r.max_active_observed)?;
    Ok(d)
}

/// The asynchronous training engine: worker threads hosting a placed graph.
#[pyclass]
struct Engine {
    inner: driftnet::runtime::Engine,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (
        graph,
        workers = 1,
        max_active_keys = 1,
        min_update_frequency = 1,
        optimizer = "sgd",
        lr = 0.1,
        momentum = 0.9,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        graph: &Graph,
        workers: usize,
        max_active_keys: usize,
        min_update_frequency: usize,
        optimizer: &str,
        lr: f64,
        momentum: f64,
        seed: u64,
    ) -> PyResult<Engine> {
        let cfg = EngineConfig {
            workers,
            max_active_keys,
            optimizer: optimizer_of(optimizer, lr, momentum)?,
            min_update_frequency,
            seed,
            ..EngineConfig::default()
        };
        driftnet::runtime::Engine::new(graph.inner.clone(), None, cfg)
            .map(|inner| Engine { inner })
            .map_err(runtime_err)
    }

    /// One full training pass over `pumps`; returns the epoch report.
    fn train_epoch<'py>(
        &mut self,
        py: Python<'py>,
        pumps: Vec<Pump>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let instances: Vec<InstancePump> = pumps.into_iter().map(|p| p.inner).collect();
        let report = self
            .inner
            .run_train_epoch(&instances)
            .map_err(runtime_err)?;
        report_dict(py, &report)
    }

    /// One forward-only pass; parameters are untouched.
    fn evaluate<'py>(
        &mut self,
        py: Python<'py>,
        pumps: Vec<Pump>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let instances: Vec<InstancePump> = pumps.into_iter().map(|p| p.inner).collect();
        let report = self.inner.run_eval(&instances).map_err(runtime_err)?;
        report_dict(py, &report)
    }

    fn parameterized_nodes(&self) -> Vec<String> {
        self.inner.parameterized_nodes()
    }

    /// `{node name: [matrix, ...]}` with matrices as nested lists.
    fn params(&self) -> BTreeMap<String, Vec<Vec<Vec<f64>>>> {
        self.inner
            .params_snapshot()
            .into_iter()
            .map(|(name, tensors)| (name, tensors.iter().map(tensor_to_rows).collect()))
            .collect()
    }

    fn load_params(&mut self, params: BTreeMap<String, Vec<Vec<Vec<f64>>>>) -> PyResult<()> {
        let mut converted = Vec::with_capacity(params.len());
        for (name, tensors) in params {
            let ts: PyResult<Vec<Tensor>> = tensors.into_iter().map(rows_to_tensor).collect();
            converted.push((name, ts?));
        }
        self.inner.load_params(converted).map_err(runtime_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Engine(nodes={}, workers={})",
            self.inner.graph().node_count(),
            self.inner.placement().workers()
        )
    }
}

/// Compares every parameter gradient on one instance against central finite
/// differences of the evaluation loss.
#[pyfunction]
#[pyo3(signature = (graph, pump, seed = 0, epsilon = 1e-6, tolerance = 1e-5))]
fn check_gradients<'py>(
    py: Python<'py>,
    graph: &Graph,
    pump: &Pump,
    seed: u64,
    epsilon: f64,
    tolerance: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let report =
        driftnet::gradcheck::check_gradients(graph.inner.clone(), &pump.inner, seed, epsilon, tolerance)
            .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("passed", report.passed())?;
    d.set_item("max_rel_err", report.max_rel_err())?;
    d.set_item("elements", report.elements())?;
    let blocks = report
        .blocks
        .iter()
        .map(|b| {
            let e = PyDict::new(py);
            e.set_item("name", &b.name)?;
            e.set_item("elements", b.elements)?;
            e.set_item("max_rel_err", b.max_rel_err)?;
            Ok(e)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("blocks", blocks)?;
    Ok(d)
}

#[pymodule]
fn driftnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Pump>()?;
    m.add_class::<Engine>()?;
    m.add_class::<TreeSample>()?;
    m.add_class::<GraphSample>()?;
    m.add_function(wrap_pyfunction!(mlp_pump, m)?)?;
    m.add_function(wrap_pyfunction!(rnn_pump, m)?)?;
    m.add_function(wrap_pyfunction!(gen_list_reduction, m)?)?;
    m.add_function(wrap_pyfunction!(gen_trees, m)?)?;
    m.add_function(wrap_pyfunction!(gen_two_hop, m)?)?;
    m.add_function(wrap_pyfunction!(check_gradients, m)?)?;
    m.add("LIST_VOCAB", data::LIST_VOCAB)?;
    m.add("LIST_CLASSES", data::LIST_CLASSES)?;
    m.add("GRAPH_VOCAB", data::GRAPH_VOCAB)?;
    m.add("GRAPH_CLASSES", data::GRAPH_CLASSES)?;
    m.add("GRAPH_EDGE_TYPES", data::GRAPH_EDGE_TYPES)?;
    m.add("TREE_CLASSES", data::TREE_CLASSES)?;
    Ok(())
}
