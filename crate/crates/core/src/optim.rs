//! Parameter blocks with local gradient accumulation and optimizers.
//!
//! Each parameterized node owns one [`ParamBlock`]. Gradient contributions
//! accumulate until `min_update_frequency` of them have arrived; the block
//! then steps its optimizer on the *mean* gradient, entirely locally — no
//! cross-node synchronization is involved, which is what makes the training
//! scheme asynchronous. The update counter doubles as the staleness clock:
//! a backward message's staleness is the number of updates that happened
//! between its forward and backward visit to the block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: Scalar,
    },
    Momentum {
        lr: Scalar,
        #[serde(default = "default_momentum")]
        momentum: Scalar,
    },
    Adam {
        lr: Scalar,
        #[serde(default = "default_beta1")]
        beta1: Scalar,
        #[serde(default = "default_beta2")]
        beta2: Scalar,
        #[serde(default = "default_eps")]
        eps: Scalar,
    },
}

fn default_momentum() -> Scalar {
    0.9
}
fn default_beta1() -> Scalar {
    0.9
}
fn default_beta2() -> Scalar {
    0.999
}
fn default_eps() -> Scalar {
    1e-8
}

impl OptimizerKind {
    pub fn sgd(lr: Scalar) -> Self {
        OptimizerKind::Sgd { lr }
    }

    pub fn adam(lr: Scalar) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn momentum(lr: Scalar, momentum: Scalar) -> Self {
        OptimizerKind::Momentum { lr, momentum }
    }
}

/// Per-tensor optimizer slots.
#[derive(Debug, Clone, PartialEq)]
enum Slots {
    Sgd,
    Momentum { velocity: Vec<Tensor> },
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, t: u64 },
}

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("gradient count {got} does not match parameter count {want}")]
    GradientArity { got: usize, want: usize },
    #[error("gradient {index} has shape {got:?}, parameter has {want:?}")]
    GradientShape {
        index: usize,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Running staleness statistics of one block.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StalenessStats {
    pub count: u64,
    pub sum: u64,
    pub max: u64,
    /// staleness value -> occurrences
    pub histogram: BTreeMap<u64, u64>,
}

impl StalenessStats {
    pub fn record(&mut self, staleness: u64) {
        self.count += 1;
        self.sum += staleness;
        self.max = self.max.max(staleness);
        *self.histogram.entry(staleness).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &StalenessStats) {
        self.count += other.count;
        self.sum += other.sum;
        self.max = self.max.max(other.max);
        for (k, v) in &other.histogram {
            *self.histogram.entry(*k).or_insert(0) += v;
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }
}

/// Named parameters of one node plus their gradient accumulator, optimizer
/// state and staleness bookkeeping.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    names: Vec<String>,
    params: Vec<Tensor>,
    accum: Vec<Tensor>,
    accum_count: usize,
    update_counter: u64,
    min_update_frequency: usize,
    opt: OptimizerKind,
    slots: Slots,
    pub skipped_non_finite: u64,
    pub staleness: StalenessStats,
}

impl ParamBlock {
    pub fn new(
        params: Vec<(String, Tensor)>,
        opt: OptimizerKind,
        min_update_frequency: usize,
    ) -> Self {
        assert!(min_update_frequency >= 1, "min_update_frequency must be >= 1");
        let (names, params): (Vec<_>, Vec<_>) = params.into_iter().unzip();
        let zero_like = |ts: &[Tensor]| -> Vec<Tensor> {
            ts.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
        };
        let slots = match opt {
            OptimizerKind::Sgd { .. } => Slots::Sgd,
            OptimizerKind::Momentum { .. } => Slots::Momentum {
                velocity: zero_like(&params),
            },
            OptimizerKind::Adam { .. } => Slots::Adam {
                m: zero_like(&params),
                v: zero_like(&params),
                t: 0,
            },
        };
        let accum = zero_like(&params);
        ParamBlock {
            names,
            params,
            accum,
            accum_count: 0,
            update_counter: 0,
            min_update_frequency,
            opt,
            slots,
            skipped_non_finite: 0,
            staleness: StalenessStats::default(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param(&self, i: usize) -> &Tensor {
        &self.params[i]
    }

    /// Replaces the parameter tensors (weight loading). Shapes must match.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<(), OptimError> {
        if params.len() != self.params.len() {
            return Err(OptimError::GradientArity {
                got: params.len(),
                want: self.params.len(),
            });
        }
        for (i, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.shape() != old.shape() {
                return Err(OptimError::GradientShape {
                    index: i,
                    got: new.shape(),
                    want: old.shape(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn update_counter(&self) -> u64 {
        self.update_counter
    }

    pub fn pending(&self) -> usize {
        self.accum_count
    }

    /// The raw gradient accumulator (sum over contributions since the last
    /// update). Useful for gradient checking with updates disabled.
    pub fn accumulated(&self) -> &[Tensor] {
        &self.accum
    }

    /// Records the staleness of a backward visit whose forward pass saw
    /// `forward_counter`.
    pub fn record_staleness(&mut self, forward_counter: u64) {
        self.staleness
            .record(self.update_counter.saturating_sub(forward_counter));
    }

    /// Adds one gradient contribution. Non-finite contributions are skipped
    /// and counted instead of poisoning the accumulator. Steps the optimizer
    /// once `min_update_frequency` contributions have arrived; returns whether
    /// an update happened.
    pub fn accumulate(&mut self, grads: &[Tensor]) -> Result<bool, OptimError> {
        if grads.len() != self.params.len() {
            return Err(OptimError::GradientArity {
                got: grads.len(),
                want: self.params.len(),
            });
        }
        for (i, (g, p)) in grads.iter().zip(&self.params).enumerate() {
            if g.shape() != p.shape() {
                return Err(OptimError::GradientShape {
                    index: i,
                    got: g.shape(),
                    want: p.shape(),
                });
            }
        }
        if grads.iter().any(|g| !g.data().iter().all(|v| v.is_finite())) {
            self.skipped_non_finite += 1;
            return Ok(false);
        }
        for (a, g) in self.accum.iter_mut().zip(grads) {
            a.add_scaled_assign(g, 1.0)?;
        }
        self.accum_count += 1;
        if self.accum_count >= self.min_update_frequency {
            self.step()?;
            return Ok(true);
        }
        Ok(false)
    }

    /// Applies any leftover partial accumulation as one final (smaller-mean)
    /// update. Called when a pass drains.
    pub fn flush(&mut self) -> Result<bool, OptimError> {
        if self.accum_count == 0 {
            return Ok(false);
        }
        self.step()?;
        Ok(true)
    }

    /// Discards any partial accumulation without updating.
    pub fn discard_pending(&mut self) {
        for a in &mut self.accum {
            *a = Tensor::zeros(a.rows(), a.cols());
        }
        self.accum_count = 0;
    }

    fn step(&mut self) -> Result<(), OptimError> {
        let scale = 1.0 / self.accum_count as Scalar;
        let means: Vec<Tensor> = self
            .accum
            .iter()
            .map(|a| a.scale(scale))
            .collect::<Result<_, _>>()?;
        match (&mut self.slots, self.opt) {
            (Slots::Sgd, OptimizerKind::Sgd { lr }) => {
                for (p, g) in self.params.iter_mut().zip(&means) {
                    p.add_scaled_assign(g, -lr)?;
                }
            }
            (Slots::Momentum { velocity }, OptimizerKind::Momentum { lr, momentum }) => {
                for ((p, v), g) in self.params.iter_mut().zip(velocity).zip(&means) {
                    let mut nv = v.scale(momentum)?;
                    nv.add_scaled_assign(g, 1.0)?;
                    *v = nv;
                    p.add_scaled_assign(v, -lr)?;
                }
            }
            (Slots::Adam { m, v, t }, OptimizerKind::Adam { lr, beta1, beta2, eps }) => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for ((p, (mi, vi)), g) in
                    self.params.iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(&means)
                {
                    let mut nm = mi.scale(beta1)?;
                    nm.add_scaled_assign(g, 1.0 - beta1)?;
                    *mi = nm;
                    let mut nv = vi.scale(beta2)?;
                    nv.add_scaled_assign(&g.hadamard(g)?, 1.0 - beta2)?;
                    *vi = nv;
                    let step_data: Vec<Scalar> = mi
                        .data()
                        .iter()
                        .zip(vi.data())
                        .map(|(&mh, &vh)| {
                            let m_hat = mh / bc1;
                            let v_hat = vh / bc2;
                            m_hat / (v_hat.sqrt() + eps)
                        })
                        .collect();
                    let step_t = Tensor::new(p.rows(), p.cols(), step_data)?;
                    p.add_scaled_assign(&step_t, -lr)?;
                }
            }
            _ => unreachable!("slots always match the optimizer kind"),
        }
        self.discard_pending();
        self.update_counter += 1;
        Ok(())
    }

    /// Averages parameters and optimizer slots across replica blocks,
    /// writing the result back into every block. Pending partial gradients
    /// must have been flushed or discarded first.
    pub fn sync_replicas(blocks: &mut [&mut ParamBlock]) -> Result<(), OptimError> {
        let k = blocks.len();
        if k <= 1 {
            return Ok(());
        }
        for b in blocks.iter() {
            assert_eq!(
                b.accum_count, 0,
                "replica sync requires flushed accumulators"
            );
        }
        let scale = 1.0 / k as Scalar;
        let n_params = blocks[0].params.len();
        for i in 0..n_params {
            let mut avg = Tensor::zeros(blocks[0].params[i].rows(), blocks[0].params[i].cols());
            for b in blocks.iter() {
                avg.add_scaled_assign(&b.params[i], scale)?;
            }
            for b in blocks.iter_mut() {
                b.params[i] = avg.clone();
            }
        }
        // Average the slots the same way so replicas agree on momentum state.
        let average = |tensors: Vec<&Tensor>| -> Result<Tensor, OptimError> {
            let mut avg = Tensor::zeros(tensors[0].rows(), tensors[0].cols());
            for t in tensors {
                avg.add_scaled_assign(t, scale)?;
            }
            Ok(avg)
        };
        match blocks[0].slots {
            Slots::Sgd => {}
            Slots::Momentum { .. } => {
                for i in 0..n_params {
                    let avg = average(
                        blocks
                            .iter()
                            .map(|b| match &b.slots {
                                Slots::Momentum { velocity } => &velocity[i],
                                _ => unreachable!(),
                            })
                            .collect(),
                    )?;
                    for b in blocks.iter_mut() {
                        if let Slots::Momentum { velocity } = &mut b.slots {
                            velocity[i] = avg.clone();
                        }
                    }
                }
            }
            Slots::Adam { .. } => {
                let pick = |b: &ParamBlock, want_m: bool, i: usize| -> Tensor {
                    match &b.slots {
                        Slots::Adam { m, v, .. } => {
                            if want_m {
                                m[i].clone()
                            } else {
                                v[i].clone()
                            }
                        }
                        _ => unreachable!(),
                    }
                };
                for i in 0..n_params {
                    let ms: Vec<Tensor> = blocks.iter().map(|b| pick(b, true, i)).collect();
                    let vs: Vec<Tensor> = blocks.iter().map(|b| pick(b, false, i)).collect();
                    let avg_m = average(ms.iter().collect())?;
                    let avg_v = average(vs.iter().collect())?;
                    for b in blocks.iter_mut() {
                        if let Slots::Adam { m, v, .. } = &mut b.slots {
                            m[i] = avg_m.clone();
                            v[i] = avg_v.clone();
                        }
                    }
                }
                let max_t = blocks
                    .iter()
                    .map(|b| match &b.slots {
                        Slots::Adam { t, .. } => *t,
                        _ => 0,
                    })
                    .max()
                    .unwrap_or(0);
                for b in blocks.iter_mut() {
                    if let Slots::Adam { t, .. } = &mut b.slots {
                        *t = max_t;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(opt: OptimizerKind, muf: usize) -> ParamBlock {
        ParamBlock::new(
            vec![("w".into(), Tensor::zeros(1, 2))],
            opt,
            muf,
        )
    }

    fn grad(values: &[Scalar]) -> Vec<Tensor> {
        vec![Tensor::row_vector(values).unwrap()]
    }

    #[test]
    fn sgd_single_step_known_value() {
        let mut b = block(OptimizerKind::sgd(0.1), 1);
        let updated = b.accumulate(&grad(&[1.0, 2.0])).unwrap();
        assert!(updated);
        assert_eq!(b.param(0).data(), &[-0.1, -0.2]);
        assert_eq!(b.update_counter(), 1);
    }

    #[test]
    fn threshold_defers_then_updates_with_mean() {
        let mut b = block(OptimizerKind::sgd(1.0), 3);
        assert!(!b.accumulate(&grad(&[3.0, 0.0])).unwrap());
        assert!(!b.accumulate(&grad(&[6.0, 0.0])).unwrap());
        assert_eq!(b.param(0).data(), &[0.0, 0.0]);
        assert_eq!(b.update_counter(), 0);
        assert!(b.accumulate(&grad(&[0.0, 0.0])).unwrap());
        // mean of [3, 6, 0] = 3; w -= 1.0 * 3
        assert_eq!(b.param(0).data(), &[-3.0, 0.0]);
        assert_eq!(b.update_counter(), 1);
        assert_eq!(b.pending(), 0);
    }

    #[test]
    fn flush_applies_partial_mean() {
        let mut b = block(OptimizerKind::sgd(1.0), 5);
        b.accumulate(&grad(&[2.0, 0.0])).unwrap();
        b.accumulate(&grad(&[4.0, 0.0])).unwrap();
        assert!(b.flush().unwrap());
        // mean of [2, 4] = 3
        assert_eq!(b.param(0).data(), &[-3.0, 0.0]);
        assert_eq!(b.update_counter(), 1);
        assert!(!b.flush().unwrap());
        assert_eq!(b.update_counter(), 1);
    }

    #[test]
    fn momentum_accumulates_into_velocity() {
        let mut b = block(OptimizerKind::momentum(0.1, 0.9), 1);
        b.accumulate(&grad(&[1.0, 1.0])).unwrap();
        let after_first = b.param(0).data()[0];
        assert!((after_first - (-0.1)).abs() < 1e-12);
        b.accumulate(&grad(&[1.0, 1.0])).unwrap();
        // v = 0.9 * 1 + 1 = 1.9, so the second delta is -0.19
        let second_delta = b.param(0).data()[0] - after_first;
        assert!((second_delta - (-0.19)).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut b = block(OptimizerKind::adam(0.001), 1);
        b.accumulate(&grad(&[1.0, -1.0])).unwrap();
        // With bias correction the first step is lr * g/(|g| + eps).
        let expected = 0.001 * (1.0 / (1.0 + 1e-8));
        assert!((b.param(0).data()[0] - (-expected)).abs() < 1e-15);
        assert!((b.param(0).data()[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_uses_mean_of_accumulated_gradients() {
        let mut a = block(OptimizerKind::adam(0.01), 2);
        a.accumulate(&grad(&[1.0, 0.0])).unwrap();
        a.accumulate(&grad(&[3.0, 0.0])).unwrap();
        let mut b = block(OptimizerKind::adam(0.01), 1);
        b.accumulate(&grad(&[2.0, 0.0])).unwrap();
        assert!((a.param(0).data()[0] - b.param(0).data()[0]).abs() < 1e-15);
    }

    #[test]
    fn non_finite_contribution_skipped_and_counted() {
        let mut b = block(OptimizerKind::sgd(0.1), 1);
        let bad = vec![Tensor::new_unchecked(1, 2, vec![Scalar::NAN, 1.0])];
        assert!(!b.accumulate(&bad).unwrap());
        assert_eq!(b.skipped_non_finite, 1);
        assert_eq!(b.pending(), 0);
        assert_eq!(b.param(0).data(), &[0.0, 0.0]);
        // A following good gradient still works.
        assert!(b.accumulate(&grad(&[1.0, 0.0])).unwrap());
        assert_eq!(b.param(0).data(), &[-0.1, 0.0]);
    }

    #[test]
    fn gradient_shape_and_arity_errors() {
        let mut b = block(OptimizerKind::sgd(0.1), 1);
        assert!(matches!(
            b.accumulate(&[]),
            Err(OptimError::GradientArity { .. })
        ));
        assert!(matches!(
            b.accumulate(&[Tensor::zeros(2, 2)]),
            Err(OptimError::GradientShape { .. })
        ));
    }

    #[test]
    fn staleness_recording() {
        let mut b = block(OptimizerKind::sgd(1.0), 1);
        b.record_staleness(0);
        b.accumulate(&grad(&[1.0, 1.0])).unwrap();
        b.accumulate(&grad(&[1.0, 1.0])).unwrap();
        b.record_staleness(0); // two updates since that forward
        b.record_staleness(2); // fresh
        assert_eq!(b.staleness.count, 3);
        assert_eq!(b.staleness.max, 2);
        assert_eq!(b.staleness.sum, 2);
        assert_eq!(b.staleness.histogram[&0], 2);
        assert_eq!(b.staleness.histogram[&2], 1);
    }

    #[test]
    fn replica_sync_averages_params_and_slots() {
        let mut b1 = block(OptimizerKind::momentum(1.0, 0.5), 1);
        let mut b2 = block(OptimizerKind::momentum(1.0, 0.5), 1);
        b1.accumulate(&grad(&[1.0, 0.0])).unwrap(); // w1 = [-1, 0], v1 = [1, 0]
        b2.accumulate(&grad(&[0.0, 3.0])).unwrap(); // w2 = [0, -3], v2 = [0, 3]
        ParamBlock::sync_replicas(&mut [&mut b1, &mut b2]).unwrap();
        assert_eq!(b1.param(0).data(), &[-0.5, -1.5]);
        assert_eq!(b2.param(0).data(), &[-0.5, -1.5]);
        // Velocities averaged too: next identical steps stay in lockstep.
        b1.accumulate(&grad(&[0.0, 0.0])).unwrap();
        b2.accumulate(&grad(&[0.0, 0.0])).unwrap();
        assert_eq!(b1.param(0).data(), b2.param(0).data());
    }

    #[test]
    fn staleness_stats_merge() {
        let mut a = StalenessStats::default();
        a.record(1);
        a.record(3);
        let mut b = StalenessStats::default();
        b.record(0);
        b.merge(&a);
        assert_eq!(b.count, 3);
        assert_eq!(b.sum, 4);
        assert_eq!(b.max, 3);
        assert!((b.mean() - 4.0 / 3.0).abs() < 1e-12);
    }
}
