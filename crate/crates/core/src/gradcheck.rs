//! End-to-end validation of the backward pass: the gradient a training pass
//! accumulates for every parameter element is compared against a central
//! finite difference of the evaluation loss.
//!
//! The engine runs the instance once in training mode with updates disabled,
//! which leaves the raw gradient sum in each parameter block. Each element is
//! then perturbed by ±ε and the evaluation loss re-measured; since a single
//! sequential worker is used, both directions see bitwise-identical operation
//! order and the difference quotient isolates the perturbed element.

use crate::ir::graph::IrGraph;
use crate::optim::OptimizerKind;
use crate::runtime::{Engine, EngineConfig, InstancePump, RuntimeError};
use crate::tensor::Tensor;

/// Result for one parameter block.
#[derive(Debug, Clone)]
pub struct BlockCheck {
    pub name: String,
    /// Total scalar elements checked across the block's tensors.
    pub elements: usize,
    pub max_rel_err: f64,
    /// `(tensor index, flat element index, analytic, numeric)` for the worst
    /// element, if the block has any.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Result of a whole-graph gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub tolerance: f64,
    pub epsilon: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn elements(&self) -> usize {
        self.blocks.iter().map(|b| b.elements).sum()
    }
}

impl std::fmt::Display for GradCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for b in &self.blocks {
            write!(
                f,
                "{:>12}  {:>5} elements  max rel err {:.3e}",
                b.name, b.elements, b.max_rel_err
            )?;
            if let Some((ti, i, a, n)) = b.worst {
                write!(f, "  (worst: tensor {ti}[{i}] analytic {a:.6e} numeric {n:.6e})")?;
            }
            writeln!(f)?;
        }
        write!(
            f,
            "overall: {} elements, max rel err {:.3e} vs tolerance {:.1e} -> {}",
            self.elements(),
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Default central-difference step. Small enough that, at `f64` loss scales,
/// truncation and roundoff both sit orders of magnitude below the tolerance.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Default pass/fail threshold on the per-element relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Relative error with an absolute floor: elements whose gradient is exactly
/// zero on both sides (untouched embedding rows, unused edge-type weights)
/// must not fail on finite-difference noise alone.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Checks every parameter element of `graph` on one instance.
///
/// The pump must include a loss label so evaluation passes complete. The
/// check needs `f64` precision; building with the `single` feature makes the
/// difference quotient meaningless and is rejected.
pub fn check_gradients(
    graph: IrGraph,
    pump: &InstancePump,
    seed: u64,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradCheck, RuntimeError> {
    if cfg!(feature = "single") {
        return Err(RuntimeError::Config(
            "gradient checking requires the double-precision build".into(),
        ));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(RuntimeError::Config(format!(
            "epsilon must be positive and finite, got {epsilon}"
        )));
    }

    let cfg = EngineConfig {
        workers: 1,
        max_active_keys: 1,
        optimizer: OptimizerKind::sgd(0.0),
        min_update_frequency: usize::MAX,
        seed,
        apply_updates: false,
        ..EngineConfig::default()
    };
    let mut engine = Engine::new(graph, None, cfg)?;
    let instances = std::slice::from_ref(pump);

    engine.run_train_epoch(instances)?;
    let names = engine.parameterized_nodes();
    let analytic: Vec<(String, Vec<Tensor>)> = names
        .iter()
        .map(|n| {
            let block = engine.param_block(n).expect("parameterized node");
            (n.clone(), block.accumulated().to_vec())
        })
        .collect();
    engine.discard_pending();

    let mut blocks = Vec::with_capacity(analytic.len());
    for (name, grads) in analytic {
        let base: Vec<Tensor> = engine
            .param_block(&name)
            .expect("parameterized node")
            .params()
            .to_vec();
        let mut elements = 0;
        let mut max_rel = 0.0f64;
        let mut worst = None;
        for (ti, tensor) in base.iter().enumerate() {
            for i in 0..tensor.data().len() {
                let plus = loss_with(&mut engine, &name, &base, ti, i, epsilon, instances)?;
                let minus = loss_with(&mut engine, &name, &base, ti, i, -epsilon, instances)?;
                let numeric = (plus - minus) / (2.0 * epsilon);
                let a = grads[ti].data()[i];
                let err = rel_err(a, numeric);
                if err > max_rel {
                    max_rel = err;
                    worst = Some((ti, i, a, numeric));
                }
                elements += 1;
            }
        }
        engine
            .param_block_mut(&name)
            .expect("parameterized node")
            .set_params(base)?;
        blocks.push(BlockCheck {
            name,
            elements,
            max_rel_err: max_rel,
            worst,
        });
    }

    Ok(GradCheck {
        tolerance,
        epsilon,
        blocks,
    })
}

/// Evaluation loss with one element of `name`'s `ti`-th tensor shifted by
/// `delta` from its base value.
fn loss_with(
    engine: &mut Engine,
    name: &str,
    base: &[Tensor],
    ti: usize,
    i: usize,
    delta: f64,
    instances: &[InstancePump],
) -> Result<f64, RuntimeError> {
    let mut tensors = base.to_vec();
    let mut data = tensors[ti].data().to_vec();
    data[i] += delta;
    tensors[ti] = Tensor::new(tensors[ti].rows(), tensors[ti].cols(), data)
        .map_err(|e| RuntimeError::Config(e.to_string()))?;
    engine
        .param_block_mut(name)
        .expect("parameterized node")
        .set_params(tensors)?;
    let report = engine.run_eval(instances)?;
    Ok(report.loss.loss_sum)
}
