//! Messages: a payload tensor plus a state, flowing forward or backward.

use crate::ir::state::State;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

/// The unit of work exchanged between nodes.
///
/// `train` distinguishes training traffic (which populates caches in
/// anticipation of a backward pass) from evaluation traffic (which must leave
/// no residue behind).
#[derive(Debug, Clone)]
pub struct Message {
    pub direction: Direction,
    pub payload: Tensor,
    pub state: State,
    pub train: bool,
}

impl Message {
    pub fn forward(payload: Tensor, state: State, train: bool) -> Self {
        Message {
            direction: Direction::Forward,
            payload,
            state,
            train,
        }
    }

    pub fn backward(payload: Tensor, state: State) -> Self {
        Message {
            direction: Direction::Backward,
            payload,
            state,
            train: true,
        }
    }

    pub fn is_forward(&self) -> bool {
        self.direction == Direction::Forward
    }
}
