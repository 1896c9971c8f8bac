//! Parameterized payload transforms: dense affine maps, embedding lookups
//! and GRU cells.
//!
//! All three share the same protocol. Forward: compute with the *current*
//! parameters, cache the input payload and the block's update counter under
//! the state's key projection, pass the state through untouched. Backward:
//! pop the cache, recompute whatever intermediates are needed (again with the
//! current parameters — the forward activations may be stale by now, which is
//! exactly the asynchrony the optimizer tolerates), send the input gradient
//! upstream and feed the parameter gradient to the local accumulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ir::graph::{EdgeId, NodeKind};
use crate::ir::message::Message;
use crate::ir::state::KeyFn;
use crate::nodes::{Emits, KeyedCache, NodeError};
use crate::optim::ParamBlock;
use crate::tensor::{glorot, Tensor};

/// Initial parameter tensors for a parameterized kind, drawn from a seeded
/// per-node stream. Returns an empty set for unparameterized kinds.
pub fn init_params(kind: &NodeKind, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        NodeKind::Linear { input, output, .. } => vec![
            ("w".into(), glorot(*input, *output, &mut rng)),
            ("b".into(), Tensor::zeros(1, *output)),
        ],
        NodeKind::Lookup { vocab, dim, .. } => {
            vec![("table".into(), glorot(*vocab, *dim, &mut rng))]
        }
        NodeKind::GruCell { dim, .. } => {
            let d = *dim;
            let mut p = Vec::new();
            for gate in ["z", "r", "h"] {
                p.push((format!("wm{gate}"), glorot(d, d, &mut rng)));
                p.push((format!("wh{gate}"), glorot(d, d, &mut rng)));
                p.push((format!("b{gate}"), Tensor::zeros(1, d)));
            }
            p
        }
        _ => Vec::new(),
    }
}

#[derive(Debug)]
struct CachedForward {
    input: Tensor,
    counter: u64,
}

/// `y = x W + b`, applied to every payload row.
#[derive(Debug)]
pub struct LinearNode {
    input: usize,
    output: usize,
    key: KeyFn,
    in_edge: EdgeId,
    out_edge: EdgeId,
    block: ParamBlock,
    cache: KeyedCache<CachedForward>,
}

impl LinearNode {
    pub fn new(
        input: usize,
        output: usize,
        key: KeyFn,
        in_edge: EdgeId,
        out_edge: EdgeId,
        block: ParamBlock,
    ) -> Self {
        LinearNode {
            input,
            output,
            key,
            in_edge,
            out_edge,
            block,
            cache: KeyedCache::new(),
        }
    }

    pub fn block(&self) -> &ParamBlock {
        &self.block
    }

    pub fn block_mut(&mut self) -> &mut ParamBlock {
        &mut self.block
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
            if msg.payload.cols() != self.input {
                return Err(NodeError::BadPayload {
                    expected: format!("r x {}", self.input),
                    got: msg.payload.shape(),
                });
            }
            let y = msg
                .payload
                .matmul(self.block.param(0))?
                .add_row_broadcast(self.block.param(1))?;
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.cache.insert(
                    key,
                    &msg.state,
                    CachedForward {
                        input: msg.payload,
                        counter: self.block.update_counter(),
                    },
                )?;
            }
            out.push((self.out_edge, Message::forward(y, msg.state, msg.train)));
        } else {
            let key = self.key.key_of(&msg.state)?;
            let fwd = self.cache.take(&key, &msg.state)?;
            self.block.record_staleness(fwd.counter);
            let g = &msg.payload;
            if g.shape() != (fwd.input.rows(), self.output) {
                return Err(NodeError::BadPayload {
                    expected: format!("{} x {}", fwd.input.rows(), self.output),
                    got: g.shape(),
                });
            }
            let dx = g.matmul_nt(self.block.param(0))?;
            let dw = fwd.input.matmul_tn(g)?;
            let db = g.sum_rows()?;
            self.block.accumulate(&[dw, db])?;
            out.push((self.in_edge, Message::backward(dx, msg.state)));
        }
        Ok(())
    }
}

/// Embedding lookup: payload is a single row of token ids, output stacks one
/// table row per token.
#[derive(Debug)]
pub struct LookupNode {
    vocab: usize,
    dim: usize,
    key: KeyFn,
    in_edge: EdgeId,
    out_edge: EdgeId,
    block: ParamBlock,
    cache: KeyedCache<CachedForward>,
}

impl LookupNode {
    pub fn new(
        vocab: usize,
        dim: usize,
        key: KeyFn,
        in_edge: EdgeId,
        out_edge: EdgeId,
        block: ParamBlock,
    ) -> Self {
        LookupNode {
            vocab,
            dim,
            key,
            in_edge,
            out_edge,
            block,
            cache: KeyedCache::new(),
        }
    }

    pub fn block(&self) -> &ParamBlock {
        &self.block
    }

    pub fn block_mut(&mut self) -> &mut ParamBlock {
        &mut self.block
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cache_dump(&self) -> Vec<String> {
        self.cache.dump()
    }

    fn ids_of(&self, payload: &Tensor) -> Result<Vec<usize>, NodeError> {
        if payload.rows() != 1 {
            return Err(NodeError::BadPayload {
                expected: "1 x k row of token ids".into(),
                got: payload.shape(),
            });
        }
        payload
            .data()
            .iter()
            .map(|&v| {
                let id = v as i64;
                if v.fract() != 0.0 || id < 0 || id as usize >= self.vocab {
                    Err(NodeError::BadPayload {
                        expected: format!("integer token ids in 0..{}", self.vocab),
                        got: payload.shape(),
                    })
                } else {
                    Ok(id as usize)
                }
            })
            .collect()
    }

    pub fn process(&mut self, msg: Message, via: EdgeId, out: &mut Emits) -> Result<(), NodeError> {
        if msg.is_forward() {
            if via != self.in_edge {
                return Err(NodeError::UnexpectedEdge(via));
            }
            let ids = self.ids_of(&msg.payload)?;
            let rows: Vec<Tensor> = ids
                .iter()
                .map(|&id| self.block.param(0).row_tensor(id))
                .collect::<Result<_, _>>()?;
            let y = Tensor::vcat(&rows.iter().collect::<Vec<_>>())?;
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.cache.insert(
                    key,
                    &msg.state,
                    CachedForward {
                        input: msg.payload,
                        counter: self.block.update_counter(),
                    },
                )?;
            }
            out.push((self.out_edge, Message::forward(y, msg.state, msg.train)));
        } else {
            let key = self.key.key_of(&msg.state)?;
            let fwd = self.cache.take(&key, &msg.state)?;
            self.block.record_staleness(fwd.counter);
            let ids = self.ids_of(&fwd.input)?;
            let g = &msg.payload;
            if g.shape() != (ids.len(), self.dim) {
                return Err(NodeError::BadPayload {
                    expected: format!("{} x {}", ids.len(), self.dim),
                    got: g.shape(),
                });
            }
            let mut dtable = vec![0.0; self.vocab * self.dim];
            for (row, &id) in ids.iter().enumerate() {
                for (o, v) in dtable[id * self.dim..(id + 1) * self.dim]
                    .iter_mut()
                    .zip(g.row(row))
                {
                    *o += v;
                }
            }
            self.block.accumulate(&[Tensor::new(self.vocab, self.dim, dtable)?])?;
            // Token ids carry no gradient; the upstream message restores the
            // state with a zero payload.
            let dx = Tensor::zeros(1, ids.len());
            out.push((self.in_edge, Message::backward(dx, msg.state)));
        }
        Ok(())
    }
}

/// GRU cell over a payload whose rows are `[m | h]` concatenations.
#[derive(Debug)]
pub struct GruNode {
    dim: usize,
    key: KeyFn,
    in_edge: EdgeId,
    out_edge: EdgeId,
    block: ParamBlock,
    cache: KeyedCache<CachedForward>,
}

/// Index layout of the GRU parameter block.
const WMZ: usize = 0;
const WHZ: usize = 1;
const BZ: usize = 2;
const WMR: usize = 3;
const WHR: usize = 4;
const BR: usize = 5;
const WMH: usize = 6;
const WHH: usize = 7;
const BH: usize = 8;

impl GruNode {
    pub fn new(dim: usize, key: KeyFn, in_edge: EdgeId, out_edge: EdgeId, block: ParamBlock) -> Self {
        GruNode {
            dim,
            key,
            in_edge,
            out_edge,
            block,
            cache: KeyedCache::new(),
        }
    }

    pub fn block(&self) -> &ParamBlock {
        &self.block
    }

    pub fn block_mut(&mut self) -> &mut ParamBlock {
        &mut self.block
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
            let y = gru_forward(&msg.payload, self.block.params(), self.dim)?.h_new;
            if msg.train {
                let key = self.key.key_of(&msg.state)?;
                self.cache.insert(
                    key,
                    &msg.state,
                    CachedForward {
                        input: msg.payload,
                        counter: self.block.update_counter(),
                    },
                )?;
            }
            out.push((self.out_edge, Message::forward(y, msg.state, msg.train)));
        } else {
            let key = self.key.key_of(&msg.state)?;
            let fwd = self.cache.take(&key, &msg.state)?;
            self.block.record_staleness(fwd.counter);
            let (dx, grads) = gru_backward(&fwd.input, self.block.params(), self.dim, &msg.payload)?;
            self.block.accumulate(&grads)?;
            out.push((self.in_edge, Message::backward(dx, msg.state)));
        }
        Ok(())
    }
}

struct GruParts {
    m: Tensor,
    h: Tensor,
    z: Tensor,
    r: Tensor,
    rh: Tensor,
    h_tilde: Tensor,
    h_new: Tensor,
}

fn gru_forward(x: &Tensor, p: &[Tensor], dim: usize) -> Result<GruParts, NodeError> {
    if x.cols() != 2 * dim {
        return Err(NodeError::BadPayload {
            expected: format!("r x {} ([m | h])", 2 * dim),
            got: x.shape(),
        });
    }
    let parts = x.split_cols(&[dim, dim])?;
    let (m, h) = (parts[0].clone(), parts[1].clone());
    let sig = crate::tensor::Activation::Sigmoid;
    let tanh = crate::tensor::Activation::Tanh;
    let z = sig.apply(
        &m.matmul(&p[WMZ])?
            .add(&h.matmul(&p[WHZ])?)?
            .add_row_broadcast(&p[BZ])?,
    );
    let r = sig.apply(
        &m.matmul(&p[WMR])?
            .add(&h.matmul(&p[WHR])?)?
            .add_row_broadcast(&p[BR])?,
    );
    let rh = r.hadamard(&h)?;
    let h_tilde = tanh.apply(
        &m.matmul(&p[WMH])?
            .add(&rh.matmul(&p[WHH])?)?
            .add_row_broadcast(&p[BH])?,
    );
    // h' = (1 - z) .* h + z .* h~
    let ones = Tensor::filled(z.rows(), z.cols(), 1.0)?;
    let h_new = ones.sub(&z)?.hadamard(&h)?.add(&z.hadamard(&h_tilde)?)?;
    Ok(GruParts {
        m,
        h,
        z,
        r,
        rh,
        h_tilde,
        h_new,
    })
}

fn gru_backward(
    x: &Tensor,
    p: &[Tensor],
    dim: usize,
    g: &Tensor,
) -> Result<(Tensor, Vec<Tensor>), NodeError> {
    let f = gru_forward(x, p, dim)?;
    if g.shape() != f.h_new.shape() {
        return Err(NodeError::BadPayload {
            expected: format!("{} x {}", f.h_new.rows(), f.h_new.cols()),
            got: g.shape(),
        });
    }
    let ones = Tensor::filled(g.rows(), g.cols(), 1.0)?;
    let dz = g.hadamard(&f.h_tilde.sub(&f.h)?)?;
    let dh_tilde = g.hadamard(&f.z)?;
    let mut dh = g.hadamard(&ones.sub(&f.z)?)?;
    // Through tanh: u = m Wmh + (r.*h) Whh + bh
    let du = dh_tilde.hadamard(&ones.sub(&f.h_tilde.hadamard(&f.h_tilde)?)?)?;
    let mut dm = du.matmul_nt(&p[WMH])?;
    let drh = du.matmul_nt(&p[WHH])?;
    let dr = drh.hadamard(&f.h)?;
    dh = dh.add(&drh.hadamard(&f.r)?)?;
    // Through the sigmoids.
    let dvr = dr.hadamard(&f.r)?.hadamard(&ones.sub(&f.r)?)?;
    let dvz = dz.hadamard(&f.z)?.hadamard(&ones.sub(&f.z)?)?;
    dm = dm.add(&dvr.matmul_nt(&p[WMR])?)?.add(&dvz.matmul_nt(&p[WMZ])?)?;
    dh = dh.add(&dvr.matmul_nt(&p[WHR])?)?.add(&dvz.matmul_nt(&p[WHZ])?)?;
    let grads = vec![
        f.m.matmul_tn(&dvz)?,  // wmz
        f.h.matmul_tn(&dvz)?,  // whz
        dvz.sum_rows()?,       // bz
        f.m.matmul_tn(&dvr)?,  // wmr
        f.h.matmul_tn(&dvr)?,  // whr
        dvr.sum_rows()?,       // br
        f.m.matmul_tn(&du)?,   // wmh
        f.rh.matmul_tn(&du)?,  // whh
        du.sum_rows()?,        // bh
    ];
    let dx = Tensor::hcat(&[&dm, &dh])?;
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::state::{Field, State};
    use crate::optim::OptimizerKind;
    use crate::tensor::Scalar as S;

    const IN: EdgeId = EdgeId(0);
    const OUT: EdgeId = EdgeId(1);

    fn linear_with(w: Vec<S>, b: Vec<S>, input: usize, output: usize, muf: usize) -> LinearNode {
        let mut block = ParamBlock::new(
            vec![
                ("w".into(), Tensor::zeros(input, output)),
                ("b".into(), Tensor::zeros(1, output)),
            ],
            OptimizerKind::sgd(1.0),
            muf,
        );
        block
            .set_params(vec![
                Tensor::new(input, output, w).unwrap(),
                Tensor::new(1, output, b).unwrap(),
            ])
            .unwrap();
        LinearNode::new(input, output, KeyFn::instance(), IN, OUT, block)
    }

    fn fwd(payload: Tensor, instance: i64) -> Message {
        Message::forward(payload, State::new(instance), true)
    }

    #[test]
    fn linear_forward_backward_known_values() {
        // W = identity-ish, b = [0.5, -0.5]
        let mut n = linear_with(vec![1.0, 0.0, 0.0, 1.0], vec![0.5, -0.5], 2, 2, 1);
        let mut out = Vec::new();
        n.process(fwd(Tensor::row_vector(&[1.0, 2.0]).unwrap(), 7), IN, &mut out)
            .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, OUT);
        assert!(out[0].1.is_forward());
        assert_eq!(out[0].1.payload.data(), &[1.5, 1.5]);
        assert_eq!(n.cache_len(), 1);

        let mut out2 = Vec::new();
        n.process(
            Message::backward(Tensor::row_vector(&[1.0, 1.0]).unwrap(), State::new(7)),
            OUT,
            &mut out2,
        )
        .unwrap();
        // dx = g W^T = [1, 1]; message goes upstream along the in-edge.
        assert_eq!(out2[0].0, IN);
        assert_eq!(out2[0].1.payload.data(), &[1.0, 1.0]);
        assert_eq!(n.cache_len(), 0);
        // dW = x^T g = [[1,1],[2,2]], db = [1,1]; sgd lr=1, muf=1.
        assert_eq!(n.block().param(0).data(), &[0.0, -1.0, -2.0, -1.0]);
        assert_eq!(n.block().param(1).data(), &[-0.5, -1.5]);
        assert_eq!(n.block().update_counter(), 1);
    }

    #[test]
    fn duplicate_forward_key_is_rejected() {
        let mut n = linear_with(vec![1.0], vec![0.0], 1, 1, 10);
        let mut out = Vec::new();
        n.process(fwd(Tensor::scalar(1.0).unwrap(), 1), IN, &mut out).unwrap();
        let err = n
            .process(fwd(Tensor::scalar(2.0).unwrap(), 1), IN, &mut out)
            .unwrap_err();
        assert!(matches!(err, NodeError::DuplicateKey { .. }));
    }

    #[test]
    fn backward_without_forward_is_rejected() {
        let mut n = linear_with(vec![1.0], vec![0.0], 1, 1, 10);
        let mut out = Vec::new();
        let err = n
            .process(
                Message::backward(Tensor::scalar(1.0).unwrap(), State::new(3)),
                OUT,
                &mut out,
            )
            .unwrap_err();
        assert!(matches!(err, NodeError::MissingCache { .. }));
    }

    #[test]
    fn eval_forward_leaves_no_cache() {
        let mut n = linear_with(vec![1.0], vec![0.0], 1, 1, 10);
        let mut out = Vec::new();
        let msg = Message::forward(Tensor::scalar(1.0).unwrap(), State::new(1), false);
        n.process(msg, IN, &mut out).unwrap();
        assert_eq!(n.cache_len(), 0);
        assert!(!out[0].1.train);
    }

    #[test]
    fn staleness_counts_updates_between_forward_and_backward() {
        let mut n = linear_with(vec![1.0], vec![0.0], 1, 1, 1);
        let mut out = Vec::new();
        n.process(fwd(Tensor::scalar(1.0).unwrap(), 1), IN, &mut out).unwrap();
        n.process(fwd(Tensor::scalar(1.0).unwrap(), 2), IN, &mut out).unwrap();
        n.process(
            Message::backward(Tensor::scalar(1.0).unwrap(), State::new(1)),
            OUT,
            &mut out,
        )
        .unwrap();
        n.process(
            Message::backward(Tensor::scalar(1.0).unwrap(), State::new(2)),
            OUT,
            &mut out,
        )
        .unwrap();
        // First backward saw 0 updates since its forward, second saw 1.
        assert_eq!(n.block().staleness.histogram[&0], 1);
        assert_eq!(n.block().staleness.histogram[&1], 1);
    }

    #[test]
    fn lookup_forward_stacks_rows_and_backward_scatters() {
        let mut block = ParamBlock::new(
            vec![("table".into(), Tensor::zeros(3, 2))],
            OptimizerKind::sgd(1.0),
            1,
        );
        block
            .set_params(vec![Tensor::new(3, 2, vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap()])
            .unwrap();
        let mut n = LookupNode::new(3, 2, KeyFn::instance(), IN, OUT, block);
        let mut out = Vec::new();
        n.process(fwd(Tensor::row_vector(&[2.0, 0.0, 2.0]).unwrap(), 1), IN, &mut out)
            .unwrap();
        assert_eq!(out[0].1.payload.shape(), (3, 2));
        assert_eq!(out[0].1.payload.data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);

        let g = Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let mut out2 = Vec::new();
        n.process(Message::backward(g, State::new(1)), OUT, &mut out2).unwrap();
        // Token 2 appears twice: its gradient rows add. sgd lr=1.
        assert_eq!(n.block().param(0).row(2), &[18.0, 21.0]);
        assert_eq!(n.block().param(0).row(0), &[0.0, 1.0]);
        // Upstream ack payload is a zero row over the ids.
        assert_eq!(out2[0].1.payload.shape(), (1, 3));
        assert_eq!(out2[0].1.payload.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(n.cache_len(), 0);
    }

    #[test]
    fn lookup_rejects_bad_ids() {
        let block = ParamBlock::new(
            vec![("table".into(), Tensor::zeros(3, 2))],
            OptimizerKind::sgd(1.0),
            1,
        );
        let mut n = LookupNode::new(3, 2, KeyFn::instance(), IN, OUT, block);
        let mut out = Vec::new();
        for bad in [
            Tensor::row_vector(&[3.0]).unwrap(),
            Tensor::row_vector(&[-1.0]).unwrap(),
            Tensor::row_vector(&[0.5]).unwrap(),
        ] {
            let err = n.process(fwd(bad, 1), IN, &mut out).unwrap_err();
            assert!(matches!(err, NodeError::BadPayload { .. }));
        }
    }

    // Finite-difference checks of the GRU cell math, double precision only.
    #[cfg(not(feature = "single"))]
    mod gru_fd {
        use super::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        fn setup(dim: usize, rows: usize) -> (Vec<Tensor>, Tensor, Tensor) {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let params = init_params(
                &NodeKind::GruCell {
                    dim,
                    key: KeyFn::instance(),
                },
                9,
            )
            .into_iter()
            .map(|(_, mut t)| {
                // Give the zero-initialized biases some life for the check.
                if t.rows() == 1 {
                    t = crate::tensor::glorot(1, t.cols(), &mut rng);
                }
                t
            })
            .collect();
            let x = crate::tensor::glorot(rows, 2 * dim, &mut rng);
            let w = crate::tensor::glorot(rows, dim, &mut rng);
            (params, x, w)
        }

        fn loss_of(x: &Tensor, p: &[Tensor], dim: usize, w: &Tensor) -> S {
            gru_forward(x, p, dim)
                .unwrap()
                .h_new
                .hadamard(w)
                .unwrap()
                .data()
                .iter()
                .sum()
        }

        #[test]
        fn input_gradient_matches_fd() {
            let dim = 3;
            let (p, x, w) = setup(dim, 2);
            let g = w.clone();
            let (dx, _) = gru_backward(&x, &p, dim, &g).unwrap();
            let h = 1e-6;
            for i in 0..x.len() {
                let mut data_p = x.data().to_vec();
                data_p[i] += h;
                let mut data_m = x.data().to_vec();
                data_m[i] -= h;
                let xp = Tensor::new(x.rows(), x.cols(), data_p).unwrap();
                let xm = Tensor::new(x.rows(), x.cols(), data_m).unwrap();
                let fd = (loss_of(&xp, &p, dim, &w) - loss_of(&xm, &p, dim, &w)) / (2.0 * h);
                assert!(
                    (fd - dx.data()[i]).abs() < 1e-6,
                    "dx[{i}]: fd={fd} analytic={}",
                    dx.data()[i]
                );
            }
        }

        #[test]
        fn parameter_gradients_match_fd() {
            let dim = 2;
            let (p, x, w) = setup(dim, 2);
            let (_, grads) = gru_backward(&x, &p, dim, &w).unwrap();
            let h = 1e-6;
            for pi in 0..p.len() {
                for i in 0..p[pi].len() {
                    let mut pp = p.clone();
                    let mut data = pp[pi].data().to_vec();
                    data[i] += h;
                    pp[pi] = Tensor::new(p[pi].rows(), p[pi].cols(), data).unwrap();
                    let mut pm = p.clone();
                    let mut data = pm[pi].data().to_vec();
                    data[i] -= h;
                    pm[pi] = Tensor::new(p[pi].rows(), p[pi].cols(), data).unwrap();
                    let fd = (loss_of(&x, &pp, dim, &w) - loss_of(&x, &pm, dim, &w)) / (2.0 * h);
                    assert!(
                        (fd - grads[pi].data()[i]).abs() < 1e-6,
                        "param {pi} grad[{i}]: fd={fd} analytic={}",
                        grads[pi].data()[i]
                    );
                }
            }
        }
    }

    #[test]
    fn gru_state_passes_through_untouched() {
        let block = ParamBlock::new(
            init_params(
                &NodeKind::GruCell {
                    dim: 2,
                    key: KeyFn::instance(),
                },
                5,
            ),
            OptimizerKind::sgd(0.1),
            1,
        );
        let mut n = GruNode::new(2, KeyFn::instance_and(&[Field::Step]), IN, OUT, block);
        let state = State::new(3).with(Field::Step, 1);
        let mut out = Vec::new();
        n.process(
            Message::forward(Tensor::zeros(1, 4), state.clone(), true),
            IN,
            &mut out,
        )
        .unwrap();
        assert_eq!(out[0].1.state, state);
        assert_eq!(out[0].1.payload.shape(), (1, 2));
    }
}
