//! Worker threads: inbox draining, backward-first local scheduling, and
//! message routing between workers.

use std::collections::{BinaryHeap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender, TryRecvError};
use std::sync::Arc;

use crate::ir::graph::{EdgeId, NodeId, CONTROLLER};
use crate::ir::message::Message;
use crate::ir::state::InstanceId;
use crate::ir::IrGraph;
use crate::nodes::NodeInstance;

#[derive(Debug)]
pub(crate) enum Envelope {
    Deliver {
        node: NodeId,
        via: EdgeId,
        msg: Message,
    },
    Stop,
}

#[derive(Debug)]
pub(crate) enum CtrlEvent {
    /// A backward message reached a controller entry edge.
    Ack { instance: InstanceId },
    /// A node rejected a message or panicked; the pass must abort.
    Fault { node: String, error: String },
}

/// Per-pass message accounting, shared by all threads.
#[derive(Debug, Default)]
pub(crate) struct PassCounters {
    pub sent: AtomicU64,
    pub received: AtomicU64,
    pub processed: AtomicU64,
}

/// Realizes graph edges over worker inboxes: forward messages go to the
/// edge's head, backward messages to its tail, and backward messages on entry
/// edges become controller acknowledgements.
#[derive(Clone)]
pub(crate) struct Router {
    pub graph: Arc<IrGraph>,
    /// Worker index per node id.
    pub placement: Arc<Vec<usize>>,
    pub inboxes: Arc<Vec<Sender<Envelope>>>,
    pub ctrl: Sender<CtrlEvent>,
    pub counters: Arc<PassCounters>,
}

impl Router {
    /// Sends one message along `edge`. Send failures are ignored: a closed
    /// inbox only happens during shutdown of an already-failed pass.
    pub fn send(&self, edge: EdgeId, msg: Message) {
        let e = self.graph.edge(edge);
        let dest = if msg.is_forward() { e.to } else { e.from };
        if dest == CONTROLLER {
            let ack = CtrlEvent::Ack {
                instance: msg.state.instance,
            };
            if self.ctrl.send(ack).is_ok() {
                self.counters.sent.fetch_add(1, Ordering::Relaxed);
            }
        } else {
            let envelope = Envelope::Deliver {
                node: dest,
                via: edge,
                msg,
            };
            if self.inboxes[self.placement[dest.0 as usize]].send(envelope).is_ok() {
                self.counters.sent.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn fault(&self, node: NodeId, error: String) {
        let _ = self.ctrl.send(CtrlEvent::Fault {
            node: self.graph.name(node).to_string(),
            error,
        });
    }
}

/// Queue entry. Backward messages outrank forward ones; within a class,
/// earlier arrival wins (per-worker FIFO).
struct PqItem {
    backward: bool,
    seq: u64,
    node: NodeId,
    via: EdgeId,
    msg: Message,
}

impl PartialEq for PqItem {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl Eq for PqItem {}

impl PartialOrd for PqItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PqItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.backward
            .cmp(&other.backward)
            .then(other.seq.cmp(&self.seq))
    }
}

pub(crate) struct Worker<'a> {
    pub nodes: HashMap<NodeId, &'a mut NodeInstance>,
    pub inbox: Receiver<Envelope>,
    pub router: Router,
}

impl Worker<'_> {
    pub fn run(mut self) {
        let mut pq: BinaryHeap<PqItem> = BinaryHeap::new();
        let mut seq: u64 = 0;
        let mut stopping = false;
        let mut emits = Vec::new();
        let mut enqueue = |env: Envelope, pq: &mut BinaryHeap<PqItem>, stopping: &mut bool| {
            match env {
                Envelope::Deliver { node, via, msg } => {
                    self.router.counters.received.fetch_add(1, Ordering::Relaxed);
                    pq.push(PqItem {
                        backward: !msg.is_forward(),
                        seq,
                        node,
                        via,
                        msg,
                    });
                    seq += 1;
                }
                Envelope::Stop => *stopping = true,
            }
        };
        loop {
            // Offload the whole inbox before touching the queue, so a
            // backward message never waits behind a forward one that arrived
            // in the same batch.
            loop {
                match self.inbox.try_recv() {
                    Ok(env) => enqueue(env, &mut pq, &mut stopping),
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return,
                }
            }
            if let Some(item) = pq.pop() {
                let node = self
                    .nodes
                    .get_mut(&item.node)
                    .expect("message routed to a node this worker does not host");
                let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    node.process(item.msg, item.via, &mut emits)
                }));
                match outcome {
                    Ok(Ok(())) => {
                        for (edge, msg) in emits.drain(..) {
                            self.router.send(edge, msg);
                        }
                        self.router.counters.processed.fetch_add(1, Ordering::Relaxed);
                    }
                    Ok(Err(e)) => {
                        self.router.fault(item.node, e.to_string());
                        return;
                    }
                    Err(payload) => {
                        self.router.fault(item.node, panic_text(payload));
                        return;
                    }
                }
            } else if stopping {
                return;
            } else {
                match self.inbox.recv() {
                    Ok(env) => enqueue(env, &mut pq, &mut stopping),
                    Err(_) => return,
                }
            }
        }
    }
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        format!("panicked: {s}")
    } else if let Some(s) = payload.downcast_ref::<String>() {
        format!("panicked: {s}")
    } else {
        "panicked".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::state::State;
    use crate::tensor::Tensor;

    fn item(backward: bool, seq: u64) -> PqItem {
        PqItem {
            backward,
            seq,
            node: NodeId(0),
            via: EdgeId(0),
            msg: Message::forward(Tensor::zeros(1, 1), State::new(0), true),
        }
    }

    #[test]
    fn backward_outranks_forward_and_fifo_within_class() {
        let mut pq = BinaryHeap::new();
        pq.push(item(false, 0));
        pq.push(item(false, 1));
        pq.push(item(true, 2));
        pq.push(item(true, 3));
        pq.push(item(false, 4));
        let order: Vec<(bool, u64)> = std::iter::from_fn(|| pq.pop())
            .map(|i| (i.backward, i.seq))
            .collect();
        assert_eq!(
            order,
            vec![(true, 2), (true, 3), (false, 0), (false, 1), (false, 4)]
        );
    }
}
