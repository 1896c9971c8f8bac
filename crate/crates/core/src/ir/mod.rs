//! The static intermediate representation: typed states attached to messages,
//! node/edge graph structure, validation, and the JSON graph schema.

pub mod graph;
pub mod message;
pub mod schema;
pub mod state;

pub use graph::{
    Edge, EdgeId, FanoutGen, GraphBuilder, GraphError, GroupExpect, IrGraph, LossKind, MergeRule,
    NodeId, NodeKind, NodeSpec, Port, Predicate, PredicateError, RowGen, StateUpdate, CONTROLLER,
};
pub use message::{Direction, Message};
pub use schema::GraphDoc;
pub use state::{
    AuxData, Field, GraphAux, InstanceId, Key, KeyField, KeyFn, MissingField, State, TreeAux,
};
