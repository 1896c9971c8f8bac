//! Non-parameterized payload transforms.

use crate::ir::graph::EdgeId;
use crate::ir::message::Message;
use crate::ir::state::KeyFn;
use crate::nodes::{Emits, KeyedCache, NodeError};
use crate::tensor::{Activation, Tensor};

/// Pointwise activation; caches its forward input to rebuild the local
/// derivative on the backward pass.
#[derive(Debug)]
pub struct ActivationNode {
    f: Activation,
    key: KeyFn,
    in_edge: EdgeId,
    out_edge: EdgeId,
    cache: KeyedCache<Tensor>,
}

impl ActivationNode {
    pub fn new(f: Activation, key: KeyFn, in_edge: EdgeId, out_edge: EdgeId) -> Self {
        ActivationNode {
            f,
            key,
            in_edge,
            out_edge,
            cache: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.cache.dump()
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let y = self.f.apply(&msg.payload);
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.cache.insert(key, &msg.state, msg.payload)?;
            }
            out.push((self.out_edge, Message::forward(y, msg.state, msg.train)));
        } else {
            let key = self.key.key_of(&msg.state)?;
            let x = self.cache.take(&key, &msg.state)?;
            let dx = self.f.backward(&x, &msg.payload)?;
            out.push((self.in_edge, Message::backward(dx, msg.state)));
        }
        Ok(())
    }
}

/// Sums all payload rows into one; backward broadcasts the gradient row back
/// over the cached row count.
#[derive(Debug)]
pub struct SumRowsNode {
    key: KeyFn,
    in_edge: EdgeId,
    out_edge: EdgeId,
    cache: KeyedCache<usize>,
}

impl SumRowsNode {
    pub fn new(key: KeyFn, in_edge: EdgeId, out_edge: EdgeId) -> Self {
        SumRowsNode {
            key,
            in_edge,
            out_edge,
            cache: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.cache.dump()
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let y = msg.payload.sum_rows()?;
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.cache.insert(key, &msg.state, msg.payload.rows())?;
            }
            out.push((self.out_edge, Message::forward(y, msg.state, msg.train)));
        } else {
            let key = self.key.key_of(&msg.state)?;
            let rows = self.cache.take(&key, &msg.state)?;
            if msg.payload.rows() != 1 {
                return Err(NodeError::BadPayload {
                    expected: "1 x c gradient".into(),
                    got: msg.payload.shape(),
                });
            }
            let dx = msg.payload.repeat_rows(rows)?;
            out.push((self.in_edge, Message::backward(dx, msg.state)));
        }
        Ok(())
    }
}

/// Reshapes `rows x c` payloads into `1 x rows*c`. The fixed row count makes
/// the node stateless: backward is just the inverse reshape.
#[derive(Debug)]
pub struct FlattenNode {
    rows: usize,
    in_edge: EdgeId,
    out_edge: EdgeId,
}

impl FlattenNode {
    pub fn new(rows: usize, in_edge: EdgeId, out_edge: EdgeId) -> Self {
        FlattenNode {
            rows,
            in_edge,
            out_edge,
        }
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            if msg.payload.rows() != self.rows {
                return Err(NodeError::BadPayload {
                    expected: format!("{} x c", self.rows),
                    got: msg.payload.shape(),
                });
            }
            let y = msg.payload.reshape(1, msg.payload.len())?;
            out.push((self.out_edge, Message::forward(y, msg.state, msg.train)));
        } else {
            let cols = msg.payload.len() / self.rows;
            if msg.payload.rows() != 1 || cols * self.rows != msg.payload.len() {
                return Err(NodeError::BadPayload {
                    expected: format!("1 x {}k gradient", self.rows),
                    got: msg.payload.shape(),
                });
            }
            let dx = msg.payload.reshape(self.rows, cols)?;
            out.push((self.in_edge, Message::backward(dx, msg.state)));
        }
        Ok(())
    }
}

/// Transposes the payload; self-inverse and stateless.
#[derive(Debug)]
pub struct TransposeNode {
    in_edge: EdgeId,
    out_edge: EdgeId,
}

impl TransposeNode {
    pub fn new(in_edge: EdgeId, out_edge: EdgeId) -> Self {
        TransposeNode { in_edge, out_edge }
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        let y = msg.payload.transpose();
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            out.push((self.out_edge, Message::forward(y, msg.state, msg.train)));
        } else {
            out.push((self.in_edge, Message::backward(y, msg.state)));
        }
        Ok(())
    }
}
