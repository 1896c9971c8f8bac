//! Straight-line single-threaded SGD trainer for the sequence model.
//!
//! Used as the oracle for the synchronous-equivalence criterion: with
//! `max_active_keys = 1` the engine trains instances strictly one after
//! another, so an ordinary loop that accumulates gradients per parameter
//! block and steps every `min_update_frequency` contributions must land on
//! bit-identical weights. The kernels below replay the engine's arithmetic
//! in the same operation order: matrix products accumulate over the inner
//! dimension in ascending index order, the bias is added after the product,
//! gradients recompute against the *current* parameters (which may have
//! stepped mid-instance), and the update applies the mean of the
//! accumulated contributions.
//!
//! Per-instance contribution order, matching backward-first scheduling:
//! readout once, then for t from last to first, the cell followed by the
//! embedding row of token t.

use driftnet::tensor::Tensor;

/// One parameter block: tensors (row-major), gradient accumulators, and the
/// local update schedule.
struct Block {
    params: Vec<Vec<f64>>,
    accum: Vec<Vec<f64>>,
    count: usize,
    muf: usize,
    lr: f64,
}

impl Block {
    fn new(params: Vec<Vec<f64>>, muf: usize, lr: f64) -> Block {
        let accum = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Block {
            params,
            accum,
            count: 0,
            muf,
            lr,
        }
    }

    fn contribute(&mut self, grads: &[&[f64]]) {
        for (a, g) in self.accum.iter_mut().zip(grads) {
            for (av, gv) in a.iter_mut().zip(*g) {
                *av += 1.0 * gv;
            }
        }
        self.count += 1;
        if self.count >= self.muf {
            self.step();
        }
    }

    fn flush(&mut self) {
        if self.count > 0 {
            self.step();
        }
    }

    fn step(&mut self) {
        let scale = 1.0 / self.count as f64;
        for (p, a) in self.params.iter_mut().zip(&mut self.accum) {
            for (pv, av) in p.iter_mut().zip(a.iter_mut()) {
                *pv += -self.lr * (*av * scale);
                *av = 0.0;
            }
        }
        self.count = 0;
    }
}

/// `x (1 x k) * w (k x n) + b`, accumulating over k in ascending order with
/// the bias added in a second pass.
fn affine(x: &[f64], w: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (l, &a) in x.iter().enumerate() {
        let w_row = &w[l * n..(l + 1) * n];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += a * wv;
        }
    }
    for (o, &bv) in out.iter_mut().zip(b) {
        *o += bv;
    }
    out
}

/// `g (1 x n) * w^T`, one dot product per row of `w (k x n)`.
fn matvec_nt(g: &[f64], w: &[f64], k: usize) -> Vec<f64> {
    let n = g.len();
    (0..k)
        .map(|j| {
            let w_row = &w[j * n..(j + 1) * n];
            g.iter().zip(w_row).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// `x^T (k x 1) * g (1 x n)`.
fn outer(x: &[f64], g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let mut out = vec![0.0; x.len() * n];
    for (i, &a) in x.iter().enumerate() {
        let o_row = &mut out[i * n..(i + 1) * n];
        for (o, &b) in o_row.iter_mut().zip(g) {
            *o += a * b;
        }
    }
    out
}

/// Row sum of a single row: a fresh zero buffer plus the row.
fn bias_grad(g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.len()];
    for (o, &v) in out.iter_mut().zip(g) {
        *o += v;
    }
    out
}

/// Cross-entropy gradient: softmax of the logits with 1 subtracted at the
/// label, max-shifted exactly like the engine's softmax.
fn softmax_minus_onehot(z: &[f64], class: usize) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    let mut g: Vec<f64> = exps.iter().map(|e| e / denom).collect();
    g[class] -= 1.0;
    g
}

pub struct RnnOracle {
    vocab: usize,
    embed: usize,
    hidden: usize,
    table: Block,
    cell: Block,
    readout: Block,
}

impl RnnOracle {
    /// Starts from the engine's initial parameters so both sides share the
    /// seed-derived initialization.
    pub fn from_snapshot(
        snapshot: &[(String, Vec<Tensor>)],
        embed: usize,
        hidden: usize,
        muf: usize,
        lr: f64,
    ) -> RnnOracle {
        let tensors_of = |name: &str| -> Vec<Vec<f64>> {
            snapshot
                .iter()
                .find(|(n, _)| n == name)
                .unwrap_or_else(|| panic!("snapshot lacks `{name}`"))
                .1
                .iter()
                .map(|t| t.data().to_vec())
                .collect()
        };
        let table = tensors_of("embed");
        let vocab = table[0].len() / embed;
        RnnOracle {
            vocab,
            embed,
            hidden,
            table: Block::new(table, muf, lr),
            cell: Block::new(tensors_of("cell"), muf, lr),
            readout: Block::new(tensors_of("readout"), muf, lr),
        }
    }

    pub fn train_epoch(&mut self, data: &[(Vec<usize>, usize)]) {
        for (tokens, label) in data {
            self.train_instance(tokens, *label);
        }
        self.table.flush();
        self.cell.flush();
        self.readout.flush();
    }

    fn train_instance(&mut self, tokens: &[usize], label: usize) {
        let (e, h) = (self.embed, self.hidden);
        let mut xs = Vec::with_capacity(tokens.len());
        let mut zs = Vec::with_capacity(tokens.len());
        let mut hid = vec![0.0; h];
        for &tok in tokens {
            let mut x = Vec::with_capacity(e + h);
            x.extend_from_slice(&self.table.params[0][tok * e..(tok + 1) * e]);
            x.extend_from_slice(&hid);
            let z = affine(&x, &self.cell.params[0], &self.cell.params[1], h);
            hid = z.iter().map(|&v| v.max(0.0)).collect();
            xs.push(x);
            zs.push(z);
        }
        let classes = self.readout.params[1].len();
        let logits = affine(&hid, &self.readout.params[0], &self.readout.params[1], classes);
        let g = softmax_minus_onehot(&logits, label);

        // Readout: input gradient against the pre-step weights, then the
        // parameter contribution (which may trigger an update).
        let mut dh = matvec_nt(&g, &self.readout.params[0], h);
        let dw = outer(&hid, &g);
        let db = bias_grad(&g);
        self.readout.contribute(&[&dw, &db]);

        for t in (0..tokens.len()).rev() {
            let dz: Vec<f64> = zs[t]
                .iter()
                .zip(&dh)
                .map(|(&v, &gv)| {
                    let d = if v > 0.0 { 1.0 } else { 0.0 };
                    d * gv
                })
                .collect();
            let dx = matvec_nt(&dz, &self.cell.params[0], e + h);
            let dw = outer(&xs[t], &dz);
            let db = bias_grad(&dz);
            self.cell.contribute(&[&dw, &db]);

            // The embedding contribution for step t lands before the cell
            // contribution for step t-1: the joint's backward emits the
            // embedding slice first and the worker queue is FIFO within the
            // backward class.
            let mut dtable = vec![0.0; self.vocab * e];
            for (o, &v) in dtable[tokens[t] * e..(tokens[t] + 1) * e]
                .iter_mut()
                .zip(&dx[..e])
            {
                *o += v;
            }
            self.table.contribute(&[&dtable]);

            dh = dx[e..].to_vec();
        }
    }

    /// Parameters in engine snapshot layout, for bitwise comparison.
    pub fn params(&self) -> Vec<(String, Vec<Vec<f64>>)> {
        vec![
            ("cell".into(), self.cell.params.clone()),
            ("embed".into(), self.table.params.clone()),
            ("readout".into(), self.readout.params.clone()),
        ]
    }
}
