//! Seeded dataset generators and file loaders.
//!
//! Every generator derives one RNG per instance from `(seed, index)`, so a
//! dataset is byte-identical across runs and an instance's content never
//! depends on how many instances surround it.

use std::fs::File;
use std::io::{BufWriter, Read, Write as _};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::state::{GraphAux, TreeAux};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic number: got {got:#010x}, want {want:#010x}")]
    BadMagic { got: u32, want: u32 },
    #[error("{what}: want {want} bytes, file has {got}")]
    Truncated {
        what: &'static str,
        want: usize,
        got: usize,
    },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("parse error at byte {at}: {what}")]
    Parse { at: usize, what: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

// --- List reduction -------------------------------------------------------

/// Token indexing for list-reduction sequences: tokens 0-9 are the digits,
/// tokens 10-13 are the operations in [`ReduceOp::ALL`] order. A sequence is
/// the operation token followed by the digit tokens, at most 10 tokens total.
pub const LIST_VOCAB: usize = 14;
pub const LIST_CLASSES: usize = 10;
pub const MAX_DIGITS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReduceOp {
    /// Mean of the digits.
    Mean,
    /// Mean of even positions minus mean of odd positions.
    AltMean,
    /// Max minus min.
    Range,
    /// Number of digits.
    Len,
}

impl ReduceOp {
    pub const ALL: [ReduceOp; 4] = [
        ReduceOp::Mean,
        ReduceOp::AltMean,
        ReduceOp::Range,
        ReduceOp::Len,
    ];

    pub fn token(self) -> usize {
        10 + Self::ALL.iter().position(|&o| o == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReduceOp::Mean => "mean",
            ReduceOp::AltMean => "alt_mean",
            ReduceOp::Range => "range",
            ReduceOp::Len => "len",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListReductionInstance {
    pub op: ReduceOp,
    pub digits: Vec<u8>,
    pub label: u8,
}

impl ListReductionInstance {
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = Vec::with_capacity(1 + self.digits.len());
        t.push(self.op.token());
        t.extend(self.digits.iter().map(|&d| d as usize));
        t
    }
}

/// Applies a reduction to a digit list. `AltMean` needs at least 2 digits.
pub fn reduce(op: ReduceOp, digits: &[u8]) -> f64 {
    let mean = |xs: &mut dyn Iterator<Item = u8>| {
        let (mut sum, mut n) = (0u32, 0u32);
        for x in xs {
            sum += x as u32;
            n += 1;
        }
        assert!(n > 0, "mean of an empty selection");
        sum as f64 / n as f64
    };
    match op {
        ReduceOp::Mean => mean(&mut digits.iter().copied()),
        ReduceOp::AltMean => {
            mean(&mut digits.iter().copied().step_by(2))
                - mean(&mut digits.iter().copied().skip(1).step_by(2))
        }
        ReduceOp::Range => {
            (digits.iter().max().unwrap() - digits.iter().min().unwrap()) as f64
        }
        ReduceOp::Len => digits.len() as f64,
    }
}

/// Rounds half away from zero, then takes the mathematical (non-negative)
/// remainder modulo 10.
pub fn label_of(value: f64) -> u8 {
    (value.round() as i64).rem_euclid(10) as u8
}

pub fn gen_list_reduction(n: usize, seed: u64) -> Vec<ListReductionInstance> {
    assert!(n > 0);
    (0..n)
        .map(|i| {
            let mut rng = instance_rng(seed, i);
            let op = ReduceOp::ALL[rng.random_range(0..ReduceOp::ALL.len())];
            let min_len = if op == ReduceOp::AltMean { 2 } else { 1 };
            let len = rng.random_range(min_len..=MAX_DIGITS);
            let digits: Vec<u8> = (0..len).map(|_| rng.random_range(0..=9u8)).collect();
            let label = label_of(reduce(op, &digits));
            ListReductionInstance { op, digits, label }
        })
        .collect()
}

// --- Two-hop deduction graphs ---------------------------------------------

pub const EDGE_IS_A: u32 = 0;
pub const EDGE_AFRAID_OF: u32 = 1;
/// Two semantic edge types plus their reverses.
pub const GRAPH_EDGE_TYPES: u32 = 4;
/// Category count; also the label space of the deduction task.
pub const GRAPH_CLASSES: usize = 4;
/// Annotation tokens: 0 plain entity, 1..=4 category identity, 5 the query
/// marker.
pub const GRAPH_VOCAB: usize = GRAPH_CLASSES + 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInstance {
    pub num_nodes: usize,
    pub num_edge_types: u32,
    /// One annotation token per node.
    pub annotations: Vec<usize>,
    /// `(src, dst, edge_type)` triples.
    pub edges: Vec<(u32, u32, u32)>,
    pub query: u32,
    pub label: usize,
}

impl GraphInstance {
    pub fn aux(&self) -> GraphAux {
        GraphAux::new(self.num_nodes, self.num_edge_types as usize, self.edges.clone())
    }

    pub fn annotation_row(&self) -> Tensor {
        let data = self.annotations.iter().map(|&a| a as Scalar).collect();
        Tensor::new(1, self.annotations.len(), data).unwrap()
    }
}

/// Synthetic two-hop deduction instances in the style of basic-deduction
/// question answering: entities point at categories (`is-a`), categories
/// point at the category they fear (`afraid-of`), and the label is the fear
/// of the query entity's category.
///
/// Nodes `0..4` are the categories; entities follow, the query entity first.
/// Every edge gets a reverse twin (types 2 and 3) so each node has both in-
/// and out-degree of at least one. The label depends only on draws made
/// before any non-query entity, so inflating `num_nodes` relabels nothing.
pub fn gen_two_hop_deduction(n: usize, num_nodes: usize, seed: u64) -> Vec<GraphInstance> {
    assert!(n > 0);
    assert!(num_nodes >= 8, "need at least 8 nodes");
    let k = GRAPH_CLASSES;
    (0..n)
        .map(|i| {
            let mut rng = instance_rng(seed, i);
            // Fixed-point-free fear map over the categories.
            let fear: Vec<usize> = loop {
                let mut p: Vec<usize> = (0..k).collect();
                p.shuffle(&mut rng);
                if p.iter().enumerate().all(|(a, &b)| a != b) {
                    break p;
                }
            };
            let mut edges = Vec::new();
            for c in 0..k {
                edges.push((c as u32, fear[c] as u32, EDGE_AFRAID_OF));
            }
            let mut annotations: Vec<usize> = (0..num_nodes).map(|_| 0).collect();
            for (c, a) in annotations.iter_mut().enumerate().take(k) {
                *a = 1 + c;
            }
            let query = k as u32;
            let mut label = 0;
            for e in k..num_nodes {
                let cat = rng.random_range(0..k);
                edges.push((e as u32, cat as u32, EDGE_IS_A));
                if e == query as usize {
                    annotations[e] = 1 + k;
                    label = fear[cat];
                }
            }
            let reversed: Vec<(u32, u32, u32)> =
                edges.iter().map(|&(s, d, t)| (d, s, t + 2)).collect();
            edges.extend(reversed);
            GraphInstance {
                num_nodes,
                num_edge_types: GRAPH_EDGE_TYPES,
                annotations,
                edges,
                query,
                label,
            }
        })
        .collect()
}

// --- Binary trees with a planted sentiment rule ----------------------------

pub const TREE_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeInstance {
    /// Parent of each node; `None` exactly at the root.
    pub parent: Vec<Option<u32>>,
    /// Leaf token, `None` for internal nodes.
    pub tokens: Vec<Option<u32>>,
    /// Per-node class label.
    pub labels: Vec<u8>,
    pub root: u32,
}

impl TreeInstance {
    pub fn num_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn is_leaf(&self, v: u32) -> bool {
        self.tokens[v as usize].is_some()
    }

    pub fn leaves(&self) -> Vec<u32> {
        (0..self.num_nodes() as u32)
            .filter(|&v| self.is_leaf(v))
            .collect()
    }

    pub fn root_label(&self) -> u8 {
        self.labels[self.root as usize]
    }

    pub fn aux(&self) -> TreeAux {
        TreeAux {
            parent: self.parent.clone(),
            root: self.root,
        }
    }

    /// Children of each node, ordered by id; internal nodes have exactly two.
    pub fn children(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.num_nodes()];
        for (v, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                out[*p as usize].push(v as u32);
            }
        }
        out
    }
}

/// The planted composition rule: a leaf's sentiment is its token modulo 5; a
/// branch averages its children, rounding halves up.
pub fn planted_leaf_label(token: u32) -> u8 {
    (token % TREE_CLASSES as u32) as u8
}

pub fn planted_branch_label(left: u8, right: u8) -> u8 {
    (left + right).div_ceil(2)
}

pub fn gen_trees(
    n: usize,
    depth_range: (usize, usize),
    vocab: usize,
    seed: u64,
) -> Vec<TreeInstance> {
    assert!(n > 0);
    assert!(vocab > 0);
    let (dmin, dmax) = depth_range;
    assert!(dmin <= dmax);
    (0..n)
        .map(|i| {
            let mut rng = instance_rng(seed, i);
            let mut parent = Vec::new();
            let mut tokens = Vec::new();
            let mut labels = Vec::new();
            build_subtree(
                &mut rng, &mut parent, &mut tokens, &mut labels, None, 0, dmin, dmax, vocab,
            );
            TreeInstance {
                parent,
                tokens,
                labels,
                root: 0,
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build_subtree(
    rng: &mut ChaCha8Rng,
    parent: &mut Vec<Option<u32>>,
    tokens: &mut Vec<Option<u32>>,
    labels: &mut Vec<u8>,
    up: Option<u32>,
    depth: usize,
    dmin: usize,
    dmax: usize,
    vocab: usize,
) -> u8 {
    let id = parent.len() as u32;
    parent.push(up);
    tokens.push(None);
    labels.push(0);
    let leaf = depth >= dmax || (depth >= dmin && rng.random_bool(0.5));
    let label = if leaf {
        let token = rng.random_range(0..vocab as u32);
        tokens[id as usize] = Some(token);
        planted_leaf_label(token)
    } else {
        let l = build_subtree(rng, parent, tokens, labels, Some(id), depth + 1, dmin, dmax, vocab);
        let r = build_subtree(rng, parent, tokens, labels, Some(id), depth + 1, dmin, dmax, vocab);
        planted_branch_label(l, r)
    };
    labels[id as usize] = label;
    label
}

// --- S-expression sentiment trees ------------------------------------------

/// Parses one tree per line from the standard parenthesized sentiment format,
/// e.g. `(3 (2 a) (4 b))`. Returns the trees plus the token vocabulary in
/// first-appearance order.
pub fn load_sst_format(path: &Path) -> Result<(Vec<TreeInstance>, Vec<String>), DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_sst(&text)
}

pub fn parse_sst(text: &str) -> Result<(Vec<TreeInstance>, Vec<String>), DataError> {
    let mut vocab: Vec<String> = Vec::new();
    let mut index: std::collections::HashMap<String, u32> = std::collections::HashMap::new();
    let mut trees = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        if !line.trim().is_empty() {
            let mut p = SexprParser {
                bytes: line.as_bytes(),
                pos: 0,
                base: offset,
            };
            let mut tree = TreeInstance {
                parent: Vec::new(),
                tokens: Vec::new(),
                labels: Vec::new(),
                root: 0,
            };
            p.skip_ws();
            p.node(None, &mut tree, &mut vocab, &mut index)?;
            p.skip_ws();
            if p.pos < p.bytes.len() {
                return Err(p.err("trailing input after tree"));
            }
            trees.push(tree);
        }
        offset += line.len() + 1;
    }
    Ok((trees, vocab))
}

struct SexprParser<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl SexprParser<'_> {
    fn err(&self, what: impl Into<String>) -> DataError {
        DataError::Parse {
            at: self.base + self.pos,
            what: what.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn expect(&mut self, b: u8) -> Result<(), DataError> {
        if self.bytes.get(self.pos) == Some(&b) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected `{}`", b as char)))
        }
    }

    fn word(&mut self) -> Result<&str, DataError> {
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|&b| !b.is_ascii_whitespace() && b != b'(' && b != b')')
        {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected a token"));
        }
        Ok(std::str::from_utf8(&self.bytes[start..self.pos]).expect("slice on char boundaries"))
    }

    fn node(
        &mut self,
        up: Option<u32>,
        tree: &mut TreeInstance,
        vocab: &mut Vec<String>,
        index: &mut std::collections::HashMap<String, u32>,
    ) -> Result<u32, DataError> {
        self.expect(b'(')?;
        self.skip_ws();
        let label: u8 = {
            let at = self.base + self.pos;
            let w = self.word()?;
            w.parse().map_err(|_| DataError::Parse {
                at,
                what: format!("label `{w}` is not a small integer"),
            })?
        };
        let id = tree.parent.len() as u32;
        tree.parent.push(up);
        tree.tokens.push(None);
        tree.labels.push(label);
        self.skip_ws();
        if self.bytes.get(self.pos) == Some(&b'(') {
            self.node(Some(id), tree, vocab, index)?;
            self.skip_ws();
            self.node(Some(id), tree, vocab, index)?;
            self.skip_ws();
            if self.bytes.get(self.pos) == Some(&b'(') {
                return Err(self.err("more than two children; trees must be binarized"));
            }
        } else {
            let w = self.word()?.to_string();
            let next = vocab.len() as u32;
            let tok = *index.entry(w.clone()).or_insert_with(|| {
                vocab.push(w);
                next
            });
            tree.tokens[id as usize] = Some(tok);
        }
        self.skip_ws();
        self.expect(b')')?;
        Ok(id)
    }
}

/// Prints a tree in the same parenthesized format `parse_sst` reads.
pub fn print_sst(tree: &TreeInstance, vocab: &[String]) -> String {
    fn rec(tree: &TreeInstance, children: &[Vec<u32>], vocab: &[String], v: u32, out: &mut String) {
        out.push('(');
        out.push_str(&tree.labels[v as usize].to_string());
        out.push(' ');
        match tree.tokens[v as usize] {
            Some(tok) => out.push_str(&vocab[tok as usize]),
            None => {
                let kids = &children[v as usize];
                rec(tree, children, vocab, kids[0], out);
                out.push(' ');
                rec(tree, children, vocab, kids[1], out);
            }
        }
        out.push(')');
    }
    let mut out = String::new();
    rec(tree, &tree.children(), vocab, tree.root, &mut out);
    out
}

// --- IDX image/label files --------------------------------------------------

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct LabeledImages {
    /// One `1 x (rows*cols)` tensor per image, scaled into `[0, 1]`.
    pub images: Vec<Tensor>,
    pub labels: Vec<u8>,
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImages, DataError> {
    let mut f = File::open(images_path)?;
    let magic = f.read_u32::<BigEndian>()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            got: magic,
            want: IDX_IMAGES_MAGIC,
        });
    }
    let n = f.read_u32::<BigEndian>()? as usize;
    let rows = f.read_u32::<BigEndian>()? as usize;
    let cols = f.read_u32::<BigEndian>()? as usize;
    let mut pixels = Vec::new();
    f.read_to_end(&mut pixels)?;
    if pixels.len() != n * rows * cols {
        return Err(DataError::Truncated {
            what: "image data",
            want: n * rows * cols,
            got: pixels.len(),
        });
    }

    let mut f = File::open(labels_path)?;
    let magic = f.read_u32::<BigEndian>()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            got: magic,
            want: IDX_LABELS_MAGIC,
        });
    }
    let ln = f.read_u32::<BigEndian>()? as usize;
    let mut labels = Vec::new();
    f.read_to_end(&mut labels)?;
    if labels.len() != ln {
        return Err(DataError::Truncated {
            what: "label data",
            want: ln,
            got: labels.len(),
        });
    }
    if n != ln {
        return Err(DataError::CountMismatch {
            images: n,
            labels: ln,
        });
    }

    let dim = rows * cols;
    let images = pixels
        .chunks_exact(dim)
        .map(|chunk| {
            let data = chunk.iter().map(|&b| b as Scalar / 255.0).collect();
            Tensor::new(1, dim, data).unwrap()
        })
        .collect();
    Ok(LabeledImages { images, labels })
}

/// Writes instances as line-delimited JSON for cross-checking with other
/// tooling.
pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
