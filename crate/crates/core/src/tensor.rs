//! Dense row-major 2-D tensors and the small set of math ops the engine needs.
//!
//! Every operation that can produce a new value checks that the result is
//! finite and reports `TensorError::NonFinite` instead of letting NaN/Inf
//! propagate silently through a training run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Element type for all payload and parameter math.
///
/// Defaults to `f64`; the `single` feature switches the whole crate to `f32`
/// for throughput-oriented builds.
#[cfg(not(feature = "single"))]
pub type Scalar = f64;
#[cfg(feature = "single")]
pub type Scalar = f32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: invalid shape {rows}x{cols} for buffer of len {len}")]
    BadShape {
        op: &'static str,
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("{op}: produced a non-finite element")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of bounds ({bound})")]
    OutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
}

/// Dense matrix with row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<Scalar>,
}

// Deserialization routes through `new` so serde input cannot smuggle in
// non-finite values or a mismatched buffer.
impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rows: usize,
            cols: usize,
            data: Vec<Scalar>,
        }
        let raw = Raw::deserialize(d)?;
        Tensor::new(raw.rows, raw.cols, raw.data).map_err(serde::de::Error::custom)
    }
}

impl Tensor {
    /// Builds a tensor from row-major data, rejecting length mismatches and
    /// non-finite elements.
    pub fn new(rows: usize, cols: usize, data: Vec<Scalar>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::BadShape {
                op: "new",
                rows,
                cols,
                len: data.len(),
            });
        }
        let t = Tensor { rows, cols, data };
        t.check_finite("new")?;
        Ok(t)
    }

    /// Skips the finite check; crate-internal, used to exercise the error
    /// paths that defend against non-finite values.
    #[cfg(test)]
    pub(crate) fn new_unchecked(rows: usize, cols: usize, data: Vec<Scalar>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: Scalar) -> Result<Self, TensorError> {
        Tensor::new(rows, cols, vec![value; rows * cols])
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(value: Scalar) -> Result<Self, TensorError> {
        Tensor::new(1, 1, vec![value])
    }

    /// Single-row tensor from a slice.
    pub fn row_vector(values: &[Scalar]) -> Result<Self, TensorError> {
        Tensor::new(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Scalar] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Scalar {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Scalar] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn check_finite(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape() != other.shape() {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            })
        } else {
            Ok(())
        }
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            let o_row = &mut out[i * n..(i + 1) * n];
            for (l, &a) in a_row.iter().enumerate().take(k) {
                let b_row = &other.data[l * n..(l + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor {
            rows: m,
            cols: n,
            data: out,
        };
        t.check_finite("matmul")?;
        Ok(t)
    }

    /// `self (m x k) * other^T (n x k)` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.cols != other.cols {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a_row = self.row(i);
            for j in 0..n {
                let b_row = other.row(j);
                out.push(a_row.iter().zip(b_row).map(|(a, b)| a * b).sum());
            }
        }
        let t = Tensor {
            rows: m,
            cols: n,
            data: out,
        };
        t.check_finite("matmul_nt")?;
        Ok(t)
    }

    /// `self^T (k x m) * other (k x n)` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.rows != other.rows {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, n) = (self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for l in 0..self.rows {
            let a_row = self.row(l);
            let b_row = other.row(l);
            for (i, &a) in a_row.iter().enumerate() {
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor {
            rows: m,
            cols: n,
            data: out,
        };
        t.check_finite("matmul_tn")?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "add")?;
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Adds `other` to every row of `self`; `other` must be a single row.
    pub fn add_row_broadcast(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if other.rows != 1 || other.cols != self.cols {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut data = self.data.clone();
        for r in 0..self.rows {
            for (v, b) in data[r * self.cols..(r + 1) * self.cols]
                .iter_mut()
                .zip(&other.data)
            {
                *v += b;
            }
        }
        let t = Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        t.check_finite("add_row_broadcast")?;
        Ok(t)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "sub")?;
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "hadamard")?;
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: Scalar) -> Result<Tensor, TensorError> {
        let t = Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        };
        t.check_finite("scale")?;
        Ok(t)
    }

    /// In-place `self += c * other`, the accumulation primitive used by
    /// gradient buffers and optimizer updates.
    pub fn add_scaled_assign(&mut self, other: &Tensor, c: Scalar) -> Result<(), TensorError> {
        self.same_shape(other, "add_scaled_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        self.check_finite("add_scaled_assign")
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(Scalar, Scalar) -> Scalar,
    ) -> Result<Tensor, TensorError> {
        let t = Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        t.check_finite(op)?;
        Ok(t)
    }

    pub fn transpose(&self) -> Tensor {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Concatenates tensors along columns; all inputs must share a row count.
    pub fn hcat(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let rows = parts.first().map_or(0, |t| t.rows);
        let cols: usize = parts.iter().map(|t| t.cols).sum();
        for t in parts {
            if t.rows != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "hcat",
                    lhs: (rows, cols),
                    rhs: t.shape(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for t in parts {
                data.extend_from_slice(t.row(r));
            }
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Stacks tensors along rows; all inputs must share a column count.
    pub fn vcat(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
        let cols = parts.first().map_or(0, |t| t.cols);
        let rows: usize = parts.iter().map(|t| t.rows).sum();
        for t in parts {
            if t.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "vcat",
                    lhs: (rows, cols),
                    rhs: t.shape(),
                });
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for t in parts {
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Splits into column blocks of the given widths (inverse of `hcat`).
    pub fn split_cols(&self, widths: &[usize]) -> Result<Vec<Tensor>, TensorError> {
        if widths.iter().sum::<usize>() != self.cols {
            return Err(TensorError::BadShape {
                op: "split_cols",
                rows: self.rows,
                cols: widths.iter().sum(),
                len: self.data.len(),
            });
        }
        let mut out = Vec::with_capacity(widths.len());
        let mut start = 0;
        for &w in widths {
            let mut data = Vec::with_capacity(self.rows * w);
            for r in 0..self.rows {
                data.extend_from_slice(&self.row(r)[start..start + w]);
            }
            out.push(Tensor {
                rows: self.rows,
                cols: w,
                data,
            });
            start += w;
        }
        Ok(out)
    }

    /// Copy of rows `start..start+len` as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor, TensorError> {
        if start + len > self.rows {
            return Err(TensorError::OutOfBounds {
                op: "slice_rows",
                index: start + len,
                bound: self.rows,
            });
        }
        Ok(Tensor {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        })
    }

    /// Copy of row `r` as a 1 x cols tensor.
    pub fn row_tensor(&self, r: usize) -> Result<Tensor, TensorError> {
        if r >= self.rows {
            return Err(TensorError::OutOfBounds {
                op: "row_tensor",
                index: r,
                bound: self.rows,
            });
        }
        Ok(Tensor {
            rows: 1,
            cols: self.cols,
            data: self.row(r).to_vec(),
        })
    }

    /// Sums all rows into a single 1 x cols tensor.
    pub fn sum_rows(&self) -> Result<Tensor, TensorError> {
        let mut data = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let t = Tensor {
            rows: 1,
            cols: self.cols,
            data,
        };
        t.check_finite("sum_rows")?;
        Ok(t)
    }

    /// Repeats a single-row tensor `n` times.
    pub fn repeat_rows(&self, n: usize) -> Result<Tensor, TensorError> {
        if self.rows != 1 {
            return Err(TensorError::BadShape {
                op: "repeat_rows",
                rows: self.rows,
                cols: self.cols,
                len: self.data.len(),
            });
        }
        let mut data = Vec::with_capacity(n * self.cols);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor {
            rows: n,
            cols: self.cols,
            data,
        })
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor, TensorError> {
        if rows * cols != self.data.len() {
            return Err(TensorError::BadShape {
                op: "reshape",
                rows,
                cols,
                len: self.data.len(),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let row = self.row(r);
            let max = row.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            let exps: Vec<Scalar> = row.iter().map(|v| (v - max).exp()).collect();
            let denom: Scalar = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / denom));
        }
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Scalar {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max)
    }

    pub fn frob_norm(&self) -> Scalar {
        self.data.iter().map(|v| v * v).sum::<Scalar>().sqrt()
    }

    /// Index of the largest element in row `r`.
    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = i;
            }
        }
        best
    }
}

/// Pointwise activation functions usable as payload transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let f = |v: Scalar| match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        };
        Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Gradient w.r.t. `x` given the upstream gradient, recomputed from the
    /// cached forward input.
    pub fn backward(&self, x: &Tensor, upstream: &Tensor) -> Result<Tensor, TensorError> {
        x.same_shape(upstream, "activation_backward")?;
        let d = |v: Scalar| match self {
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(v);
                s * (1.0 - s)
            }
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
        };
        let t = Tensor {
            rows: x.rows,
            cols: x.cols,
            data: x
                .data
                .iter()
                .zip(&upstream.data)
                .map(|(&v, &g)| d(v) * g)
                .collect(),
        };
        t.check_finite("activation_backward")?;
        Ok(t)
    }
}

pub fn sigmoid(v: Scalar) -> Scalar {
    1.0 / (1.0 + (-v).exp())
}

/// Gradient of `sum(softmax_rows(x) .* upstream_weights)` w.r.t. `x`, i.e. the
/// softmax Jacobian applied row-wise to the upstream gradient.
pub fn softmax_rows_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor, TensorError> {
    x.same_shape(upstream, "softmax_rows_backward")?;
    let s = x.softmax_rows();
    let mut data = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let s_row = s.row(r);
        let g_row = upstream.row(r);
        let dot: Scalar = s_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
        data.extend(s_row.iter().zip(g_row).map(|(sv, gv)| sv * (gv - dot)));
    }
    let t = Tensor {
        rows: x.rows,
        cols: x.cols,
        data,
    };
    t.check_finite("softmax_rows_backward")?;
    Ok(t)
}

/// Glorot-style uniform initialization in `[-sqrt(6/(fan_in+fan_out)), ..]`.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..limit) as Scalar)
        .collect();
    Tensor { rows, cols, data }
}
