//! Aggregation and fan-out nodes: the kinds that turn several messages into
//! one (Concat, Group) or one message into several (Split, Bcast, Flatmap,
//! Ungroup).
//!
//! The join kinds hold assembly buffers in both modes (matching is part of
//! the forward computation) but record backward-routing information only for
//! training traffic. The fan-out kinds are pure on the forward pass and
//! assemble returning gradients on the backward pass.

use crate::ir::graph::{EdgeId, FanoutGen, GroupExpect, MergeRule, RowGen};
use crate::ir::message::Message;
use crate::ir::state::{Field, KeyFn, State};
use crate::nodes::{Emits, KeyedCache, NodeError};
use crate::tensor::Tensor;

/// Joins `inputs` messages with equal keys by column concatenation. The
/// joined message carries port 0's state.
#[derive(Debug)]
pub struct ConcatNode {
    key: KeyFn,
    in_edges: Vec<EdgeId>,
    out_edge: EdgeId,
    assembly: KeyedCache<Vec<Option<Message>>>,
    routes: KeyedCache<Vec<(EdgeId, State, usize)>>,
}

impl ConcatNode {
    pub fn new(key: KeyFn, in_edges: Vec<EdgeId>, out_edge: EdgeId) -> Self {
        ConcatNode {
            key,
            in_edges,
            out_edge,
            assembly: KeyedCache::new(),
            routes: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.assembly.len() + self.routes.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        let mut d = self.assembly.dump();
        d.extend(self.routes.dump());
        d
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            let port = self
                .in_edges
                .iter()
                .position(|e| *e == via)
                .ok_or(NodeError::UnexpectedEdge(via))?;
            let key = self.key.key_of(&msg.state)?;
            let n = self.in_edges.len();
            let slots = self
                .assembly
                .entry_or_insert_with(key.clone(), || vec![None; n]);
            if slots[port].is_some() {
                return Err(NodeError::DuplicateKey {
                    key: key.to_string(),
                    state: msg.state.to_string(),
                });
            }
            slots[port] = Some(msg);
            if slots.iter().all(Option::is_some) {
                let parts: Vec<Message> = self
                    .assembly
                    .remove(&key)
                    .expect("just filled")
                    .into_iter()
                    .map(Option::unwrap)
                    .collect();
                let payloads: Vec<&Tensor> = parts.iter().map(|m| &m.payload).collect();
                let joined = Tensor::hcat(&payloads)?;
                let train = parts[0].train;
                let state = parts[0].state.clone();
                if train {
                    let info = parts
                        .iter()
                        .enumerate()
                        .map(|(i, m)| (self.in_edges[i], m.state.clone(), m.payload.cols()))
                        .collect();
                    self.routes.insert(key, &state, info)?;
                }
                out.push((self.out_edge, Message::forward(joined, state, train)));
            }
        } else {
            let key = self.key.key_of(&msg.state)?;
            let info = self.routes.take(&key, &msg.state)?;
            let widths: Vec<usize> = info.iter().map(|(_, _, w)| *w).collect();
            let parts = msg.payload.split_cols(&widths)?;
            for ((edge, state, _), part) in info.into_iter().zip(parts) {
                out.push((edge, Message::backward(part, state)));
            }
        }
        Ok(())
    }
}

/// Splits payload columns into fixed-width blocks, one per output port.
#[derive(Debug)]
pub struct SplitNode {
    key: KeyFn,
    widths: Vec<usize>,
    in_edge: EdgeId,
    out_edges: Vec<EdgeId>,
    pending: KeyedCache<(State, Vec<Option<Tensor>>)>,
}

impl SplitNode {
    pub fn new(key: KeyFn, widths: Vec<usize>, in_edge: EdgeId, out_edges: Vec<EdgeId>) -> Self {
        SplitNode {
            key,
            widths,
            in_edge,
            out_edges,
            pending: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.pending.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.pending.dump()
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let parts = msg.payload.split_cols(&self.widths)?;
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.pending.insert(
                    key,
                    &msg.state,
                    (msg.state.clone(), vec![None; self.widths.len()]),
                )?;
            }
            for (part, edge) in parts.into_iter().zip(&self.out_edges) {
                out.push((*edge, Message::forward(part, msg.state.clone(), msg.train)));
            }
        } else {
            let port = self
                .out_edges
                .iter()
                .position(|e| *e == via)
                .ok_or(NodeError::UnexpectedEdge(via))?;
            let key = self.key.key_of(&msg.state)?;
            let done = {
                let (_, slots) =
                    self.pending
                        .get_mut(&key)
                        .ok_or_else(|| NodeError::MissingCache {
                            key: key.to_string(),
                            state: msg.state.to_string(),
                        })?;
                if slots[port].is_some() {
                    return Err(NodeError::DuplicateKey {
                        key: key.to_string(),
                        state: msg.state.to_string(),
                    });
                }
                slots[port] = Some(msg.payload);
                slots.iter().all(Option::is_some)
            };
            if done {
                let (state, slots) = self.pending.take(&key, &msg.state)?;
                let parts: Vec<Tensor> = slots.into_iter().map(Option::unwrap).collect();
                let joined = Tensor::hcat(&parts.iter().collect::<Vec<_>>())?;
                out.push((self.in_edge, Message::backward(joined, state)));
            }
        }
        Ok(())
    }
}

/// Copies each forward message to every output port; sums the returning
/// gradients before sending one message upstream.
#[derive(Debug)]
pub struct BcastNode {
    key: KeyFn,
    in_edge: EdgeId,
    out_edges: Vec<EdgeId>,
    pending: KeyedCache<(State, Tensor, usize)>,
}

impl BcastNode {
    pub fn new(key: KeyFn, in_edge: EdgeId, out_edges: Vec<EdgeId>) -> Self {
        BcastNode {
            key,
            in_edge,
            out_edges,
            pending: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.pending.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.pending.dump()
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            for edge in &self.out_edges {
                out.push((
                    *edge,
                    Message::forward(msg.payload.clone(), msg.state.clone(), msg.train),
                ));
            }
        } else {
            if !self.out_edges.contains(&via) {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let key = self.key.key_of(&msg.state)?;
            let fanout = self.out_edges.len();
            let done = {
                let entry = self.pending.entry_or_insert_with(key.clone(), || {
                    (
                        msg.state.clone(),
                        Tensor::zeros(msg.payload.rows(), msg.payload.cols()),
                        fanout,
                    )
                });
                if entry.0 != msg.state {
                    return Err(NodeError::Inconsistent(format!(
                        "gradients for key {key} disagree on state: {} vs {}",
                        entry.0, msg.state
                    )));
                }
                entry.1.add_scaled_assign(&msg.payload, 1.0)?;
                entry.2 -= 1;
                entry.2 == 0
            };
            if done {
                let (state, acc, _) = self.pending.take(&key, &msg.state)?;
                out.push((self.in_edge, Message::backward(acc, state)));
            }
        }
        Ok(())
    }
}

/// Fans one message out into a state-dependent number of copies, all on the
/// same output edge but with distinct states; backward sums the returns.
#[derive(Debug)]
pub struct FlatmapNode {
    key: KeyFn,
    gen: FanoutGen,
    in_edge: EdgeId,
    out_edge: EdgeId,
    pending: KeyedCache<(State, Option<Tensor>, usize)>,
}

impl FlatmapNode {
    pub fn new(key: KeyFn, gen: FanoutGen, in_edge: EdgeId, out_edge: EdgeId) -> Self {
        FlatmapNode {
            key,
            gen,
            in_edge,
            out_edge,
            pending: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.pending.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.pending.dump()
    }

    fn expand(&self, state: &State) -> Result<Vec<State>, NodeError> {
        match &self.gen {
            FanoutGen::OutEdgesOfNode { keep } => {
                let aux = state.graph_aux().ok_or(NodeError::MissingAux { what: "graph" })?;
                let node = state
                    .get(Field::Node)
                    .ok_or(crate::ir::state::MissingField { field: Field::Node })?;
                let edges = aux
                    .out_edges
                    .get(node as usize)
                    .ok_or_else(|| NodeError::Inconsistent(format!("node {node} out of range")))?;
                if edges.is_empty() {
                    return Err(NodeError::Inconsistent(format!(
                        "flatmap fanout is 0: node {node} has no out-edges"
                    )));
                }
                Ok(edges
                    .iter()
                    .map(|&eid| {
                        let (src, dst, ty) = aux.edges[eid as usize];
                        let mut s = state.project(keep);
                        s.set(Field::Edge, eid as i64);
                        s.set(Field::Src, src as i64);
                        s.set(Field::Dst, dst as i64);
                        s.set(Field::EdgeType, ty as i64);
                        s
                    })
                    .collect())
            }
        }
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let states = self.expand(&msg.state)?;
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.pending
                    .insert(key, &msg.state, (msg.state.clone(), None, states.len()))?;
            }
            for s in states {
                out.push((
                    self.out_edge,
                    Message::forward(msg.payload.clone(), s, msg.train),
                ));
            }
        } else {
            let key = self.key.key_of(&msg.state)?;
            let done = {
                let entry = self
                    .pending
                    .get_mut(&key)
                    .ok_or_else(|| NodeError::MissingCache {
                        key: key.to_string(),
                        state: msg.state.to_string(),
                    })?;
                match &mut entry.1 {
                    Some(acc) => acc.add_scaled_assign(&msg.payload, 1.0)?,
                    acc @ None => *acc = Some(msg.payload),
                }
                entry.2 -= 1;
                entry.2 == 0
            };
            if done {
                let (state, acc, _) = self.pending.take(&key, &msg.state)?;
                out.push((self.in_edge, Message::backward(acc.unwrap(), state)));
            }
        }
        Ok(())
    }
}

/// Collects messages sharing a key into one stacked payload, ordered by a
/// state field, with the member count determined by `expect`.
#[derive(Debug)]
pub struct GroupNode {
    key: KeyFn,
    expect: GroupExpect,
    merge: MergeRule,
    order_by: Field,
    out_edge: EdgeId,
    assembly: KeyedCache<(usize, Vec<(EdgeId, Message)>)>,
    routes: KeyedCache<Vec<(EdgeId, State, usize)>>,
}

impl GroupNode {
    pub fn new(
        key: KeyFn,
        expect: GroupExpect,
        merge: MergeRule,
        order_by: Field,
        out_edge: EdgeId,
    ) -> Self {
        GroupNode {
            key,
            expect,
            merge,
            order_by,
            out_edge,
            assembly: KeyedCache::new(),
            routes: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.assembly.len() + self.routes.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        let mut d = self.assembly.dump();
        d.extend(self.routes.dump());
        d
    }

    fn expected(&self, state: &State) -> Result<usize, NodeError> {
        let graph_aux = || state.graph_aux().ok_or(NodeError::MissingAux { what: "graph" });
        let field = |f: Field| {
            state
                .get(f)
                .ok_or(crate::ir::state::MissingField { field: f })
        };
        let n = match &self.expect {
            GroupExpect::Const { n } => *n,
            GroupExpect::NodesOfInstance => graph_aux()?.num_nodes,
            GroupExpect::EdgesOfType => {
                let aux = graph_aux()?;
                let ty = field(Field::EdgeType)? as usize;
                aux.edges_by_type
                    .get(ty)
                    .ok_or_else(|| {
                        NodeError::Inconsistent(format!("edge type {ty} out of range"))
                    })?
                    .len()
            }
            GroupExpect::InDegreeOfDst => {
                let aux = graph_aux()?;
                let dst = field(Field::Dst)? as usize;
                *aux.in_degree.get(dst).ok_or_else(|| {
                    NodeError::Inconsistent(format!("dst node {dst} out of range"))
                })? as usize
            }
        };
        if n == 0 {
            return Err(NodeError::Inconsistent(
                "group expects 0 members; such a message can never complete".into(),
            ));
        }
        Ok(n)
    }

    fn merged_state(&self, first: &State) -> Result<State, NodeError> {
        match &self.merge {
            MergeRule::Project { keep } => Ok(first.project(keep)),
            MergeRule::ProjectRename { keep, from, to } => {
                let v = first
                    .get(*from)
                    .ok_or(crate::ir::state::MissingField { field: *from })?;
                let mut s = first.project(keep);
                s.set(*to, v);
                Ok(s)
            }
            MergeRule::TreeParent => {
                let aux = first.tree_aux().ok_or(NodeError::MissingAux { what: "tree" })?;
                let node = first
                    .get(Field::Node)
                    .ok_or(crate::ir::state::MissingField { field: Field::Node })?;
                let parent = aux.parent.get(node as usize).copied().flatten().ok_or_else(|| {
                    NodeError::Inconsistent(format!("tree node {node} has no parent to merge into"))
                })?;
                let mut s = State::new(first.instance);
                s.aux = first.aux.clone();
                s.set(Field::Node, parent as i64);
                s.set(Field::Parent, aux.parent_field(parent));
                s.set(Field::Root, (parent == aux.root) as i64);
                Ok(s)
            }
        }
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            let key = self.key.key_of(&msg.state)?;
            let expected = self.expected(&msg.state)?;
            let done = {
                let (want, members) = self
                    .assembly
                    .entry_or_insert_with(key.clone(), || (expected, Vec::new()));
                if members.len() >= *want {
                    return Err(NodeError::Inconsistent(format!(
                        "group key {key} received more than its {want} expected members"
                    )));
                }
                members.push((via, msg));
                members.len() == *want
            };
            if done {
                let (_, mut members) = self.assembly.remove(&key).expect("just completed");
                for (_, m) in &members {
                    if m.state.get(self.order_by).is_none() {
                        return Err(NodeError::MissingField(crate::ir::state::MissingField {
                            field: self.order_by,
                        }));
                    }
                }
                members.sort_by_key(|(_, m)| m.state.get(self.order_by).unwrap());
                for pair in members.windows(2) {
                    if pair[0].1.state.get(self.order_by) == pair[1].1.state.get(self.order_by) {
                        return Err(NodeError::Inconsistent(format!(
                            "group key {key} has duplicate `{}` values; row order would be ambiguous",
                            self.order_by.as_str()
                        )));
                    }
                }
                let payloads: Vec<&Tensor> = members.iter().map(|(_, m)| &m.payload).collect();
                let stacked = Tensor::vcat(&payloads)?;
                let state = self.merged_state(&members[0].1.state)?;
                let train = members[0].1.train;
                if train {
                    let info = members
                        .iter()
                        .map(|(via, m)| (*via, m.state.clone(), m.payload.rows()))
                        .collect();
                    // The merge may rewrite the very fields the group keys
                    // on, so the backward lookup keys on the merged state
                    // itself rather than on the member projection.
                    self.routes.insert(state.full_key(), &state, info)?;
                }
                out.push((self.out_edge, Message::forward(stacked, state, train)));
            }
        } else {
            if via != self.out_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let key = msg.state.full_key();
            let info = self.routes.take(&key, &msg.state)?;
            let mut start = 0;
            for (edge, state, rows) in info {
                let part = msg.payload.slice_rows(start, rows)?;
                start += rows;
                out.push((edge, Message::backward(part, state)));
            }
            if start != msg.payload.rows() {
                return Err(NodeError::BadPayload {
                    expected: format!("{start} gradient rows"),
                    got: msg.payload.shape(),
                });
            }
        }
        Ok(())
    }
}

/// Splits a stacked payload into one message per row with generated states;
/// backward reassembles the rows by their identifying field.
#[derive(Debug)]
pub struct UngroupNode {
    key: KeyFn,
    gen: RowGen,
    in_edge: EdgeId,
    out_edge: EdgeId,
    pending: KeyedCache<(State, Vec<Option<Tensor>>, usize)>,
}

impl UngroupNode {
    pub fn new(key: KeyFn, gen: RowGen, in_edge: EdgeId, out_edge: EdgeId) -> Self {
        UngroupNode {
            key,
            gen,
            in_edge,
            out_edge,
            pending: KeyedCache::new(),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.pending.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.pending.dump()
    }

    fn row_states(&self, state: &State, rows: usize) -> Result<Vec<State>, NodeError> {
        match &self.gen {
            RowGen::NodesOfInstance { keep } => {
                let aux = state.graph_aux().ok_or(NodeError::MissingAux { what: "graph" })?;
                if aux.num_nodes != rows {
                    return Err(NodeError::BadPayload {
                        expected: format!("{} rows (one per node)", aux.num_nodes),
                        got: (rows, 0),
                    });
                }
                Ok((0..rows)
                    .map(|i| {
                        let mut s = state.project(keep);
                        s.set(Field::Node, i as i64);
                        s
                    })
                    .collect())
            }
            RowGen::EdgesOfType { keep } => {
                let aux = state.graph_aux().ok_or(NodeError::MissingAux { what: "graph" })?;
                let ty = state
                    .get(Field::EdgeType)
                    .ok_or(crate::ir::state::MissingField { field: Field::EdgeType })?
                    as usize;
                let list = aux.edges_by_type.get(ty).ok_or_else(|| {
                    NodeError::Inconsistent(format!("edge type {ty} out of range"))
                })?;
                if list.len() != rows {
                    return Err(NodeError::BadPayload {
                        expected: format!("{} rows (edges of type {ty})", list.len()),
                        got: (rows, 0),
                    });
                }
                Ok(list
                    .iter()
                    .map(|&eid| {
                        let (src, dst, t) = aux.edges[eid as usize];
                        let mut s = state.project(keep);
                        s.set(Field::Edge, eid as i64);
                        s.set(Field::Src, src as i64);
                        s.set(Field::Dst, dst as i64);
                        s.set(Field::EdgeType, t as i64);
                        s
                    })
                    .collect())
            }
        }
    }

    /// Row index a backward state corresponds to.
    fn row_index(&self, state: &State) -> Result<usize, NodeError> {
        match &self.gen {
            RowGen::NodesOfInstance { .. } => Ok(state
                .get(Field::Node)
                .ok_or(crate::ir::state::MissingField { field: Field::Node })?
                as usize),
            RowGen::EdgesOfType { .. } => {
                let aux = state.graph_aux().ok_or(NodeError::MissingAux { what: "graph" })?;
                let ty = state
                    .get(Field::EdgeType)
                    .ok_or(crate::ir::state::MissingField { field: Field::EdgeType })?
                    as usize;
                let eid = state
                    .get(Field::Edge)
                    .ok_or(crate::ir::state::MissingField { field: Field::Edge })?
                    as u32;
                aux.edges_by_type[ty]
                    .binary_search(&eid)
                    .map_err(|_| NodeError::Inconsistent(format!("edge {eid} not of type {ty}")))
            }
        }
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let rows = msg.payload.rows();
            let states = self.row_states(&msg.state, rows)?;
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.pending
                    .insert(key, &msg.state, (msg.state.clone(), vec![None; rows], rows))?;
            }
            for (i, s) in states.into_iter().enumerate() {
                out.push((
                    self.out_edge,
                    Message::forward(msg.payload.row_tensor(i)?, s, msg.train),
                ));
            }
        } else {
            let key = self.key.key_of(&msg.state)?;
            let idx = self.row_index(&msg.state)?;
            let done = {
                let entry = self
                    .pending
                    .get_mut(&key)
                    .ok_or_else(|| NodeError::MissingCache {
                        key: key.to_string(),
                        state: msg.state.to_string(),
                    })?;
                let slot = entry.1.get_mut(idx).ok_or_else(|| {
                    NodeError::Inconsistent(format!("gradient row {idx} out of range"))
                })?;
                if slot.is_some() {
                    return Err(NodeError::DuplicateKey {
                        key: key.to_string(),
                        state: msg.state.to_string(),
                    });
                }
                *slot = Some(msg.payload);
                entry.2 -= 1;
                entry.2 == 0
            };
            if done {
                let (state, slots, _) = self.pending.take(&key, &msg.state)?;
                let rows: Vec<Tensor> = slots.into_iter().map(Option::unwrap).collect();
                let stacked = Tensor::vcat(&rows.iter().collect::<Vec<_>>())?;
                out.push((self.in_edge, Message::backward(stacked, state)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::state::{AuxData, GraphAux, TreeAux};
    use std::sync::Arc;

    const IN0: EdgeId = EdgeId(0);
    const IN1: EdgeId = EdgeId(1);
    const OUT: EdgeId = EdgeId(2);
    const OUT1: EdgeId = EdgeId(3);

    fn row(vals: &[f64]) -> Tensor {
        Tensor::row_vector(&vals.iter().map(|v| *v as crate::tensor::Scalar).collect::<Vec<_>>())
            .unwrap()
    }

    #[test]
    fn concat_joins_on_key_and_restores_both_states_backward() {
        let mut n = ConcatNode::new(KeyFn::instance_and(&[Field::T]), vec![IN0, IN1], OUT);
        let emb_state = State::new(1).with(Field::T, 0).with(Field::Len, 5);
        let h_state = State::new(1).with(Field::T, 0);
        let mut out = Vec::new();
        n.process(
            Message::forward(row(&[1.0, 2.0]), emb_state.clone(), true),
            IN0,
            &mut out,
        )
        .unwrap();
        assert!(out.is_empty(), "waits for the second input");
        n.process(
            Message::forward(row(&[3.0]), h_state.clone(), true),
            IN1,
            &mut out,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1.payload.data(), &[1.0, 2.0, 3.0]);
        // Joined message carries port 0's state.
        assert_eq!(out[0].1.state, emb_state);

        let mut back = Vec::new();
        n.process(
            Message::backward(row(&[10.0, 20.0, 30.0]), emb_state.clone()),
            OUT,
            &mut back,
        )
        .unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, IN0);
        assert_eq!(back[0].1.payload.data(), &[10.0, 20.0]);
        assert_eq!(back[0].1.state, emb_state);
        assert_eq!(back[1].0, IN1);
        assert_eq!(back[1].1.payload.data(), &[30.0]);
        assert_eq!(back[1].1.state, h_state);
        assert_eq!(n.cache_len(), 0);
    }

    #[test]
    fn concat_keeps_instances_separate() {
        let mut n = ConcatNode::new(KeyFn::instance(), vec![IN0, IN1], OUT);
        let mut out = Vec::new();
        n.process(Message::forward(row(&[1.0]), State::new(1), true), IN0, &mut out)
            .unwrap();
        n.process(Message::forward(row(&[2.0]), State::new(2), true), IN0, &mut out)
            .unwrap();
        assert!(out.is_empty());
        n.process(Message::forward(row(&[9.0]), State::new(2), true), IN1, &mut out)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].1.payload.data(), &[2.0, 9.0]);
        assert_eq!(n.cache_len(), 2); // instance 1 still assembling + route for 2
    }

    #[test]
    fn split_emits_parts_and_reassembles_gradients() {
        let mut n = SplitNode::new(KeyFn::instance(), vec![2, 1], IN0, vec![OUT, OUT1]);
        let st = State::new(4);
        let mut out = Vec::new();
        n.process(
            Message::forward(row(&[1.0, 2.0, 3.0]), st.clone(), true),
            IN0,
            &mut out,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].1.payload.data(), &[1.0, 2.0]);
        assert_eq!(out[1].1.payload.data(), &[3.0]);

        let mut back = Vec::new();
        // Gradients return out of order.
        n.process(Message::backward(row(&[30.0]), st.clone()), OUT1, &mut back)
            .unwrap();
        assert!(back.is_empty());
        n.process(Message::backward(row(&[10.0, 20.0]), st.clone()), OUT, &mut back)
            .unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, IN0);
        assert_eq!(back[0].1.payload.data(), &[10.0, 20.0, 30.0]);
        assert_eq!(n.cache_len(), 0);
    }

    #[test]
    fn bcast_copies_forward_and_sums_backward() {
        let mut n = BcastNode::new(KeyFn::instance(), IN0, vec![OUT, OUT1]);
        let st = State::new(7);
        let mut out = Vec::new();
        n.process(Message::forward(row(&[1.0]), st.clone(), true), IN0, &mut out)
            .unwrap();
        assert_eq!(out.len(), 2);

        let mut back = Vec::new();
        n.process(Message::backward(row(&[2.0]), st.clone()), OUT, &mut back).unwrap();
        assert!(back.is_empty());
        n.process(Message::backward(row(&[5.0]), st.clone()), OUT1, &mut back).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1.payload.data(), &[7.0]);
        assert_eq!(back[0].0, IN0);
        assert_eq!(n.cache_len(), 0);
    }

    fn diamond_aux() -> Arc<AuxData> {
        // 3 nodes; node 0 -> 1 (type 0), 0 -> 2 (type 1), 1 -> 2 (type 0)
        Arc::new(AuxData::Graph(GraphAux::new(
            3,
            2,
            vec![(0, 1, 0), (0, 2, 1), (1, 2, 0)],
        )))
    }

    #[test]
    fn flatmap_fans_out_per_edge_and_sums_gradients() {
        let mut n = FlatmapNode::new(
            KeyFn::instance_and(&[Field::Node]),
            FanoutGen::OutEdgesOfNode {
                keep: vec![Field::Node, Field::Step],
            },
            IN0,
            OUT,
        );
        let st = State::new(1)
            .with(Field::Node, 0)
            .with(Field::Step, 2)
            .with_aux(diamond_aux());
        let mut out = Vec::new();
        n.process(Message::forward(row(&[1.0]), st.clone(), true), IN0, &mut out)
            .unwrap();
        assert_eq!(out.len(), 2);
        let s0 = &out[0].1.state;
        assert_eq!(s0.get(Field::Edge), Some(0));
        assert_eq!(s0.get(Field::Src), Some(0));
        assert_eq!(s0.get(Field::Dst), Some(1));
        assert_eq!(s0.get(Field::EdgeType), Some(0));
        assert_eq!(s0.get(Field::Step), Some(2));
        let s1 = &out[1].1.state;
        assert_eq!(s1.get(Field::Edge), Some(1));
        assert_eq!(s1.get(Field::EdgeType), Some(1));

        let mut back = Vec::new();
        n.process(Message::backward(row(&[4.0]), s1.clone()), OUT, &mut back).unwrap();
        n.process(Message::backward(row(&[8.0]), s0.clone()), OUT, &mut back).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1.payload.data(), &[12.0]);
        assert_eq!(back[0].1.state, st);
        assert_eq!(n.cache_len(), 0);
    }

    #[test]
    fn flatmap_zero_fanout_is_loud() {
        let aux = Arc::new(AuxData::Graph(GraphAux::new(2, 1, vec![(0, 1, 0)])));
        let mut n = FlatmapNode::new(
            KeyFn::instance(),
            FanoutGen::OutEdgesOfNode { keep: vec![] },
            IN0,
            OUT,
        );
        let st = State::new(1).with(Field::Node, 1).with_aux(aux);
        let err = n
            .process(Message::forward(row(&[1.0]), st, true), IN0, &mut Vec::new())
            .unwrap_err();
        assert!(matches!(err, NodeError::Inconsistent(_)));
    }

    #[test]
    fn group_collects_orders_and_splits_gradient_rows() {
        let mut n = GroupNode::new(
            KeyFn::instance_and(&[Field::Step]),
            GroupExpect::NodesOfInstance,
            MergeRule::Project {
                keep: vec![Field::Step],
            },
            Field::Node,
            OUT,
        );
        let aux = diamond_aux();
        let st = |node: i64| {
            State::new(1)
                .with(Field::Node, node)
                .with(Field::Step, 0)
                .with_aux(aux.clone())
        };
        let mut out = Vec::new();
        // Arrive out of node order, from two different upstream edges.
        n.process(Message::forward(row(&[2.0, 2.0]), st(2), true), IN1, &mut out).unwrap();
        n.process(Message::forward(row(&[0.0, 0.0]), st(0), true), IN0, &mut out).unwrap();
        assert!(out.is_empty());
        n.process(Message::forward(row(&[1.0, 1.0]), st(1), true), IN0, &mut out).unwrap();
        assert_eq!(out.len(), 1);
        let joined = &out[0].1;
        assert_eq!(joined.payload.shape(), (3, 2));
        assert_eq!(joined.payload.row(0), &[0.0, 0.0]); // sorted by node
        assert_eq!(joined.payload.row(2), &[2.0, 2.0]);
        assert_eq!(joined.state.get(Field::Step), Some(0));
        assert_eq!(joined.state.get(Field::Node), None);

        let g = Tensor::new(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let mut back = Vec::new();
        n.process(Message::backward(g, joined.state.clone()), OUT, &mut back).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].0, IN0); // node 0 came over IN0
        assert_eq!(back[0].1.state.get(Field::Node), Some(0));
        assert_eq!(back[0].1.payload.data(), &[1.0, 1.0]);
        assert_eq!(back[2].0, IN1); // node 2 came over IN1
        assert_eq!(back[2].1.payload.data(), &[3.0, 3.0]);
        assert_eq!(n.cache_len(), 0);
    }

    #[test]
    fn group_overflow_is_loud() {
        let mut n = GroupNode::new(
            KeyFn::instance(),
            GroupExpect::Const { n: 1 },
            MergeRule::Project { keep: vec![] },
            Field::Node,
            OUT,
        );
        let mut out = Vec::new();
        n.process(
            Message::forward(row(&[1.0]), State::new(1).with(Field::Node, 0), true),
            IN0,
            &mut out,
        )
        .unwrap();
        // Bucket completed and drained; a *new* late member starts a fresh
        // bucket; but a route collision on the same key is then caught.
        let err = n
            .process(
                Message::forward(row(&[1.0]), State::new(1).with(Field::Node, 1), true),
                IN0,
                &mut out,
            )
            .unwrap_err();
        assert!(matches!(err, NodeError::DuplicateKey { .. }));
    }

    #[test]
    fn group_duplicate_order_field_is_ambiguous() {
        let mut n = GroupNode::new(
            KeyFn::instance(),
            GroupExpect::Const { n: 2 },
            MergeRule::Project { keep: vec![] },
            Field::Node,
            OUT,
        );
        let mut out = Vec::new();
        let st = State::new(1).with(Field::Node, 5);
        n.process(Message::forward(row(&[1.0]), st.clone(), true), IN0, &mut out)
            .unwrap();
        let err = n
            .process(Message::forward(row(&[2.0]), st, true), IN0, &mut out)
            .unwrap_err();
        assert!(matches!(err, NodeError::Inconsistent(_)));
    }

    #[test]
    fn group_tree_parent_merge() {
        // Tree: root 0 with children 1, 2.
        let aux = Arc::new(AuxData::Tree(TreeAux {
            parent: vec![None, Some(0), Some(0)],
            root: 0,
        }));
        let mut n = GroupNode::new(
            KeyFn::instance_and(&[Field::Parent]),
            GroupExpect::Const { n: 2 },
            MergeRule::TreeParent,
            Field::Node,
            OUT,
        );
        let st = |node: i64| {
            State::new(3)
                .with(Field::Node, node)
                .with(Field::Parent, 0)
                .with(Field::Root, 0)
                .with_aux(aux.clone())
        };
        let mut out = Vec::new();
        n.process(Message::forward(row(&[1.0]), st(2), true), IN0, &mut out).unwrap();
        n.process(Message::forward(row(&[2.0]), st(1), true), IN0, &mut out).unwrap();
        assert_eq!(out.len(), 1);
        let merged = &out[0].1.state;
        assert_eq!(merged.get(Field::Node), Some(0));
        assert_eq!(merged.get(Field::Parent), Some(-1));
        assert_eq!(merged.get(Field::Root), Some(1));
        // Rows sorted by node id: node 1 first.
        assert_eq!(out[0].1.payload.row(0), &[2.0]);
    }

    #[test]
    fn ungroup_emits_rows_and_reassembles_out_of_order() {
        let mut n = UngroupNode::new(
            KeyFn::instance_and(&[Field::Step]),
            RowGen::NodesOfInstance {
                keep: vec![Field::Step],
            },
            IN0,
            OUT,
        );
        let st = State::new(1).with(Field::Step, 1).with_aux(diamond_aux());
        let payload = Tensor::new(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0]).unwrap();
        let mut out = Vec::new();
        n.process(Message::forward(payload, st.clone(), true), IN0, &mut out).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[1].1.state.get(Field::Node), Some(1));
        assert_eq!(out[1].1.payload.data(), &[1.0, 1.0]);

        let mut back = Vec::new();
        for i in [2usize, 0, 1] {
            n.process(
                Message::backward(
                    row(&[i as f64 * 10.0, 0.0]),
                    out[i].1.state.clone(),
                ),
                OUT,
                &mut back,
            )
            .unwrap();
        }
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].1.payload.row(0), &[0.0, 0.0]);
        assert_eq!(back[0].1.payload.row(2), &[20.0, 0.0]);
        assert_eq!(back[0].1.state, st);
        assert_eq!(n.cache_len(), 0);
    }

    #[test]
    fn ungroup_row_count_must_match_structure() {
        let mut n = UngroupNode::new(
            KeyFn::instance(),
            RowGen::NodesOfInstance { keep: vec![] },
            IN0,
            OUT,
        );
        let st = State::new(1).with_aux(diamond_aux());
        let err = n
            .process(
                Message::forward(Tensor::zeros(2, 2), st, true),
                IN0,
                &mut Vec::new(),
            )
            .unwrap_err();
        assert!(matches!(err, NodeError::BadPayload { .. }));
    }

    #[test]
    fn eval_traffic_leaves_join_nodes_clean() {
        let mut n = ConcatNode::new(KeyFn::instance(), vec![IN0, IN1], OUT);
        let mut out = Vec::new();
        n.process(Message::forward(row(&[1.0]), State::new(1), false), IN0, &mut out)
            .unwrap();
        n.process(Message::forward(row(&[2.0]), State::new(1), false), IN1, &mut out)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert!(!out[0].1.train);
        assert_eq!(n.cache_len(), 0);

        let mut g = GroupNode::new(
            KeyFn::instance(),
            GroupExpect::Const { n: 2 },
            MergeRule::Project { keep: vec![] },
            Field::Node,
            OUT,
        );
        let mut out = Vec::new();
        g.process(
            Message::forward(row(&[1.0]), State::new(1).with(Field::Node, 0), false),
            IN0,
            &mut out,
        )
        .unwrap();
        g.process(
            Message::forward(row(&[2.0]), State::new(1).with(Field::Node, 1), false),
            IN0,
            &mut out,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(g.cache_len(), 0);
    }
}
