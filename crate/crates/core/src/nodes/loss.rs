//! Loss node: joins predictions with labels, records metrics, and starts the
//! backward pass.
//!
//! Predictions arrive on in-port 0 and labels on in-port 1, in either order.
//! Each matched pair produces exactly one gradient message back along the
//! prediction edge plus a zero-payload acknowledgement back along the label
//! edge (the label edge is how the controller learns an instance finished,
//! in both training and evaluation).

use crate::ir::graph::{EdgeId, LossKind};
use crate::ir::message::Message;
use crate::ir::state::KeyFn;
use crate::nodes::{Emits, KeyedCache, NodeError};
use crate::tensor::{Scalar, Tensor};

/// Per-pass scalar metrics harvested by the driver after a pass drains.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossMetrics {
    pub count: usize,
    pub loss_sum: Scalar,
    pub correct: usize,
}

impl LossMetrics {
    pub fn record(&mut self, loss: Scalar, correct: bool) {
        self.count += 1;
        self.loss_sum += loss;
        self.correct += correct as usize;
    }

    pub fn merge(&mut self, other: &LossMetrics) {
        self.count += other.count;
        self.loss_sum += other.loss_sum;
        self.correct += other.correct;
    }

    pub fn mean_loss(&self) -> Scalar {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as Scalar
        }
    }

    pub fn accuracy(&self) -> Scalar {
        if self.count == 0 {
            0.0
        } else {
            self.correct as Scalar / self.count as Scalar
        }
    }

    /// Returns the accumulated metrics and resets for the next pass.
    pub fn take(&mut self) -> LossMetrics {
        std::mem::take(self)
    }
}

#[derive(Debug)]
pub struct LossNode {
    kind: LossKind,
    key: KeyFn,
    pred_edge: EdgeId,
    label_edge: EdgeId,
    pending_pred: KeyedCache<Message>,
    pending_label: KeyedCache<Message>,
    metrics: LossMetrics,
}

impl LossNode {
    pub fn new(kind: LossKind, key: KeyFn, pred_edge: EdgeId, label_edge: EdgeId) -> Self {
        LossNode {
            kind,
            key,
            pred_edge,
            label_edge,
            pending_pred: KeyedCache::new(),
            pending_label: KeyedCache::new(),
            metrics: LossMetrics::default(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.pending_pred.len() + self.pending_label.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        let mut d = self.pending_pred.dump();
        d.extend(self.pending_label.dump());
        d
    }

    pub fn metrics_mut(&mut self) -> &mut LossMetrics {
        &mut self.metrics
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if !msg.is_forward() {
            return Err(NodeError::UnexpectedEdge(via));
        }
        let key = self.key.key_of(&msg.state)?;
        let (pred, label) = if via == self.pred_edge {
            match self.pending_label.remove(&key) {
                Some(label) => (msg, label),
                None => {
                    let state = msg.state.clone();
                    self.pending_pred.insert(key, &state, msg)?;
                    return Ok(());
                }
            }
        } else if via == self.label_edge {
            match self.pending_pred.remove(&key) {
                Some(pred) => (pred, msg),
                None => {
                    let state = msg.state.clone();
                    self.pending_label.insert(key, &state, msg)?;
                    return Ok(());
                }
            }
        } else {
            return Err(NodeError::UnexpectedEdge(via));
        };

        if pred.train != label.train {
            return Err(NodeError::Inconsistent(format!(
                "prediction (train={}) and label (train={}) disagree for state {}",
                pred.train, label.train, pred.state
            )));
        }

        let (loss, correct, grad) = score(self.kind, &pred.payload, &label.payload)?;
        self.metrics.record(loss, correct);

        if pred.train {
            out.push((self.pred_edge, Message::backward(grad, pred.state)));
        }
        // Completion acknowledgement toward whoever pumped the label.
        let ack = Tensor::zeros(label.payload.rows(), label.payload.cols());
        out.push((self.label_edge, Message::backward(ack, label.state)));
        Ok(())
    }
}

/// Scores one (prediction, label) pair: scalar loss, correctness bit, and the
/// gradient with respect to the prediction.
///
/// Cross-entropy expects a single row of logits and a single-cell integer
/// class label; correct means the arg-max class matches. Squared error
/// expects matching shapes, uses loss `sum((p - y)^2)` with gradient
/// `2 (p - y)`, and counts a prediction correct when every component is
/// within 0.5 of the label (it rounds to the target).
fn score(
    kind: LossKind,
    pred: &Tensor,
    label: &Tensor,
) -> Result<(Scalar, bool, Tensor), NodeError> {
    match kind {
        LossKind::SoftmaxCrossEntropy => {
            if pred.rows() != 1 || pred.cols() < 2 {
                return Err(NodeError::BadPayload {
                    expected: "a single row of at least 2 logits".into(),
                    got: pred.shape(),
                });
            }
            if label.shape() != (1, 1) {
                return Err(NodeError::BadPayload {
                    expected: "a 1x1 class label".into(),
                    got: label.shape(),
                });
            }
            let raw = label.get(0, 0);
            let class = raw as i64;
            if class as Scalar != raw || class < 0 || class as usize >= pred.cols() {
                return Err(NodeError::Inconsistent(format!(
                    "class label {raw} is not an integer in [0, {})",
                    pred.cols()
                )));
            }
            let class = class as usize;
            let z = pred.row(0);
            // loss = logsumexp(z) - z[class], stable under large logits
            let m = z.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<Scalar>().ln();
            let loss = lse - z[class];
            let mut g = pred.softmax_rows().data().to_vec();
            g[class] -= 1.0;
            let g = Tensor::new(1, pred.cols(), g)?;
            let correct = pred.argmax_row(0) == class;
            Ok((loss, correct, g))
        }
        LossKind::SquaredError => {
            if pred.shape() != label.shape() {
                return Err(NodeError::BadPayload {
                    expected: format!("label shape {:?}", pred.shape()),
                    got: label.shape(),
                });
            }
            let diff = pred.sub(label)?;
            let loss = diff.data().iter().map(|d| d * d).sum();
            let correct = pred.max_abs_diff(label) < 0.5;
            let grad = diff.scale(2.0)?;
            Ok((loss, correct, grad))
        }
    }
}
