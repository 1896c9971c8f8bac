//! Control-flow nodes: conditional routing, join points, and invertible
//! state updates. None of them touch payloads.

use crate::ir::graph::{EdgeId, Predicate, StateUpdate};
use crate::ir::message::Message;
use crate::ir::state::KeyFn;
use crate::nodes::{Emits, KeyedCache, NodeError};

/// Routes each forward message to the output port its predicate selects.
/// Backward messages pass straight through to the upstream edge: the route
/// taken forward is implicit in which successor sends the gradient back.
#[derive(Debug)]
pub struct CondNode {
    predicate: Predicate,
    in_edge: EdgeId,
    out_edges: Vec<EdgeId>,
}

impl CondNode {
    pub fn new(predicate: Predicate, in_edge: EdgeId, out_edges: Vec<EdgeId>) -> Self {
        CondNode {
            predicate,
            in_edge,
            out_edges,
        }
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let port = self.predicate.route(&msg.state)?;
            out.push((self.out_edges[port as usize], msg));
        } else {
            out.push((self.in_edge, msg));
        }
        Ok(())
    }
}

/// Join point for alternative paths. The forward pass records which in-edge
/// each key arrived over; the backward pass retraces exactly that edge.
#[derive(Debug)]
pub struct PhiNode {
    key: KeyFn,
    in_edges: Vec<EdgeId>,
    out_edge: EdgeId,
    origins: KeyedCache<EdgeId>,
}

impl PhiNode {
    pub fn new(key: KeyFn, in_edges: Vec<EdgeId>, out_edge: EdgeId) -> Self {
        PhiNode {
            key,
            in_edges,
            out_edge,
            origins: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.origins.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.origins.dump()
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if !self.in_edges.contains(&via) {
                return Err(NodeError::UnexpectedEdge(via));
            }
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.origins.insert(key, &msg.state, via)?;
            }
            out.push((self.out_edge, msg));
        } else {
            let key = self.key.key_of(&msg.state)?;
            let origin = self.origins.take(&key, &msg.state)?;
            out.push((origin, msg));
        }
        Ok(())
    }
}

/// Applies an invertible state update forward and its inverse backward, so
/// the state a message carried into the node is exactly restored on the way
/// back out.
#[derive(Debug)]
pub struct IsuNode {
    update: StateUpdate,
    in_edge: EdgeId,
    out_edge: EdgeId,
}

impl IsuNode {
    pub fn new(update: StateUpdate, in_edge: EdgeId, out_edge: EdgeId) -> Self {
        IsuNode {
            update,
            in_edge,
            out_edge,
        }
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let new_state = self.update.apply(&msg.state)?;
            debug_assert_eq!(
                self.update.invert(&new_state).as_ref(),
                Ok(&msg.state),
                "state update must invert cleanly"
            );
            out.push((
                self.out_edge,
                Message {
                    state: new_state,
                    ..msg
                },
            ));
        } else {
            let new_state = self.update.invert(&msg.state)?;
            out.push((
                self.in_edge,
                Message {
                    state: new_state,
                    ..msg
                },
            ));
        }
        Ok(())
    }
}
