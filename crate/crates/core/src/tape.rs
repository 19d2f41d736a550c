//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every forward pass records its ops on a fresh [`Tape`]; [`Tape::backward`]
//! walks the recording in reverse and accumulates gradients into the leaves
//! that were created with [`Tape::leaf_grad`]. The graph is rebuilt per
//! forward pass and never reused.
//!
//! Index selections (top-k, interpolation endpoints, masked-softmax support)
//! are treated as constants of the forward pass: gradients flow only through
//! the selected or interpolated values.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    /// Broadcast-add a length-n row vector to every row of an m×n matrix.
    AddBiasRow(usize, usize),
    /// Replicate a length-n vector into `rows` rows.
    BroadcastRows(usize),
    /// Multiply row i of an m×n matrix by entry i of a length-m vector.
    MulColumn(usize, usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    /// Row sums of an m×n matrix -> length-m vector.
    SumAxis1(usize),
    /// Column means of an m×n matrix -> length-n vector.
    MeanAxis0(usize),
    /// Per-column mean of the k largest entries; `selected[c]` holds the
    /// chosen row indices for column c.
    TopkMeanCols {
        input: usize,
        k: usize,
        selected: Vec<Vec<usize>>,
    },
    /// Temporal 1-D convolution with zero same-padding.
    /// x: T×Din, kernel: w×Din×Dout (row-major), bias: Dout.
    Conv1d {
        x: usize,
        kernel: usize,
        bias: usize,
        width: usize,
    },
    /// Linear interpolation of matrix rows at real positions.
    InterpRows {
        input: usize,
        positions: Vec<f64>,
    },
    /// Row-wise softmax restricted to `mask`; rows with no unmasked entry
    /// produce an all-zero output row.
    MaskedSoftmaxRows {
        input: usize,
        mask: Vec<bool>,
    },
    /// Mean-pool rows over half-open ranges -> one row per range.
    SegmentPool {
        input: usize,
        ranges: Vec<(usize, usize)>,
    },
    /// Scatter range-rows back onto a T-row timeline; overlaps sum, rows
    /// outside every range are zero.
    SegmentBroadcast {
        input: usize,
        ranges: Vec<(usize, usize)>,
    },
    SliceCols {
        input: usize,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// A dynamic compute graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Value) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Value {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Record a differentiable input (a parameter).
    pub fn leaf_grad(&mut self, value: Tensor) -> Value {
        self.push_unchecked(value, Op::Leaf, true)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Value(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Value]) -> Result<Value> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "op produced NaN/Inf (shape {:?})",
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, a: Value, b: Value) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!(
                "elementwise op on mismatched shapes {sa:?} vs {sb:?}"
            )));
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Add(a.0, b.0), &[a, b])
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Sub(a.0, b.0), &[a, b])
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Mul(a.0, b.0), &[a, b])
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape(a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Div(a.0, b.0), &[a, b])
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Scale(a.0, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::AddScalar(a.0), &[a])
    }

    pub fn relu(&mut self, a: Value) -> Result<Value> {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Relu(a.0), &[a])
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        let data = self.value(a).data().iter().map(|&x| math::exp(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Exp(a.0), &[a])
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        let data = self.value(a).data().iter().map(|&x| math::ln(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Log(a.0), &[a])
    }

    pub fn sqrt(&mut self, a: Value) -> Result<Value> {
        let data = self.value(a).data().iter().map(|&x| math::sqrt(x)).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(out, Op::Sqrt(a.0), &[a])
    }

    // ── linear algebra ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (m, k) = self.value(a).expect_matrix()?;
        let (k2, n) = self.value(b).expect_matrix()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims: {m}x{k} by {k2}x{n}"
            )));
        }
        let out = matmul_raw(self.value(a), self.value(b));
        self.push(out, Op::Matmul(a.0, b.0), &[a, b])
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src.at(i, j);
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(out, Op::Transpose(a.0), &[a])
    }

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let out = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.push(out, Op::Reshape(a.0), &[a])
    }

    /// `a + bias` with `bias` broadcast over the rows of `a`.
    pub fn add_bias_row(&mut self, a: Value, bias: Value) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::Dimension(format!(
                "bias of shape {:?} against {m}x{n} matrix",
                self.value(bias).shape()
            )));
        }
        let (av, bv) = (self.value(a), self.value(bias));
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = av.at(i, j) + bv.data()[j];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::AddBiasRow(a.0, bias.0), &[a, bias])
    }

    /// Replicate a length-n vector into a `rows`×n matrix.
    pub fn broadcast_rows(&mut self, v: Value, rows: usize) -> Result<Value> {
        let src = self.value(v);
        if src.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_rows expects a vector, got {:?}",
                src.shape()
            )));
        }
        let n = src.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push(out, Op::BroadcastRows(v.0), &[v])
    }

    /// Multiply row i of `a` by entry i of the vector `col`.
    pub fn mul_column(&mut self, a: Value, col: Value) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        if self.value(col).shape() != [m] {
            return Err(Error::Dimension(format!(
                "column of shape {:?} against {m}x{n} matrix",
                self.value(col).shape()
            )));
        }
        let (av, cv) = (self.value(a), self.value(col));
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let w = cv.data()[i];
            for j in 0..n {
                data[i * n + j] = av.at(i, j) * w;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::MulColumn(a.0, col.0), &[a, col])
    }

    // ── reductions and nonlinearities ───────────────────────────────────

    /// Softmax along `axis` (0 or 1) of a 1-D or 2-D tensor, with
    /// max-subtraction for stability.
    pub fn softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        let src = self.value(a);
        let (slices, slice_len, stride, base_stride) = softmax_layout(src.shape(), axis)?;
        let mut data = src.data().to_vec();
        for s in 0..slices {
            softmax_slice(&mut data, s * base_stride, slice_len, stride);
        }
        let out = Tensor::new(src.shape().to_vec(), data)?;
        self.push(out, Op::Softmax { input: a.0, axis }, &[a])
    }

    pub fn sum_all(&mut self, a: Value) -> Result<Value> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0), &[a])
    }

    pub fn mean_all(&mut self, a: Value) -> Result<Value> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll(a.0), &[a])
    }

    /// Row sums of an m×n matrix.
    pub fn sum_axis1(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        let src = self.value(a);
        let mut data = vec![0.0; m];
        for i in 0..m {
            data[i] = (0..n).map(|j| src.at(i, j)).sum();
        }
        let out = Tensor::vector(data);
        self.push(out, Op::SumAxis1(a.0), &[a])
    }

    /// Column means of an m×n matrix.
    pub fn mean_axis0(&mut self, a: Value) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        if m == 0 {
            return Err(Error::Dimension("column mean of empty matrix".into()));
        }
        let src = self.value(a);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src.at(i, j);
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let out = Tensor::vector(data);
        self.push(out, Op::MeanAxis0(a.0), &[a])
    }

    /// Per-column mean of the k largest entries. Gradient flows to exactly
    /// the selected entries. Ties break on lower row index.
    pub fn topk_mean_cols(&mut self, a: Value, k: usize) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        if k < 1 || k > m {
            return Err(Error::Contract(format!("top-k with k={k} on {m} rows")));
        }
        let src = self.value(a);
        let mut out = vec![0.0; n];
        let mut selected = Vec::with_capacity(n);
        for j in 0..n {
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&p, &q| {
                src.at(q, j)
                    .total_cmp(&src.at(p, j))
                    .then(p.cmp(&q))
            });
            order.truncate(k);
            out[j] = order.iter().map(|&i| src.at(i, j)).sum::<f64>() / k as f64;
            selected.push(order);
        }
        let out = Tensor::vector(out);
        self.push(out, Op::TopkMeanCols { input: a.0, k, selected }, &[a])
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Temporal convolution with zero same-padding.
    /// `x`: T×Din, `kernel`: w×Din×Dout, `bias`: Dout; output T×Dout.
    pub fn conv1d(&mut self, x: Value, kernel: Value, bias: Value) -> Result<Value> {
        let (t, din) = self.value(x).expect_matrix()?;
        let kshape = self.value(kernel).shape().to_vec();
        if kshape.len() != 3 || kshape[1] != din {
            return Err(Error::Dimension(format!(
                "conv1d kernel shape {kshape:?} against input {t}x{din}"
            )));
        }
        let (width, dout) = (kshape[0], kshape[2]);
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {width} must be odd")));
        }
        if self.value(bias).shape() != [dout] {
            return Err(Error::Dimension(format!(
                "conv1d bias shape {:?}, expected [{dout}]",
                self.value(bias).shape()
            )));
        }
        let half = width / 2;
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let mut data = vec![0.0; t * dout];
        for ti in 0..t {
            for o in 0..dout {
                let mut acc = bv.data()[o];
                for w in 0..width {
                    let src = ti as isize + w as isize - half as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..din {
                        acc += kv.data()[(w * din + c) * dout + o] * xv.at(src, c);
                    }
                }
                data[ti * dout + o] = acc;
            }
        }
        let out = Tensor::new(vec![t, dout], data)?;
        self.push(
            out,
            Op::Conv1d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
                width,
            },
            &[x, kernel, bias],
        )
    }

    /// Row i of the output is `x` linearly interpolated at real row index
    /// `positions[i]` (clamped to the valid range).
    pub fn interp_rows(&mut self, x: Value, positions: &[f64]) -> Result<Value> {
        let (t, d) = self.value(x).expect_matrix()?;
        if t == 0 {
            return Err(Error::Contract("interp_rows on empty matrix".into()));
        }
        let xv = self.value(x);
        let mut data = vec![0.0; positions.len() * d];
        for (i, &p) in positions.iter().enumerate() {
            let (lo, hi, frac) = interp_endpoints(p, t);
            for j in 0..d {
                data[i * d + j] = (1.0 - frac) * xv.at(lo, j) + frac * xv.at(hi, j);
            }
        }
        let out = Tensor::new(vec![positions.len(), d], data)?;
        self.push(
            out,
            Op::InterpRows {
                input: x.0,
                positions: positions.to_vec(),
            },
            &[x],
        )
    }

    /// Row-wise softmax restricted to a binary mask. Rows whose mask is all
    /// false yield an all-zero output row.
    pub fn masked_softmax_rows(&mut self, a: Value, mask: &[bool]) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        if mask.len() != m * n {
            return Err(Error::Dimension(format!(
                "mask of {} entries against {m}x{n} scores",
                mask.len()
            )));
        }
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row_mask = &mask[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if row_mask[j] {
                    mx = mx.max(src.at(i, j));
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0;
            for j in 0..n {
                if row_mask[j] {
                    let e = math::exp(src.at(i, j) - mx);
                    data[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= denom;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(
            out,
            Op::MaskedSoftmaxRows {
                input: a.0,
                mask: mask.to_vec(),
            },
            &[a],
        )
    }

    /// Mean-pool rows of `x` over half-open `ranges`; one output row per range.
    pub fn segment_pool(&mut self, x: Value, ranges: &[(usize, usize)]) -> Result<Value> {
        let (t, d) = self.value(x).expect_matrix()?;
        for &(s, e) in ranges {
            if s >= e || e > t {
                return Err(Error::Contract(format!(
                    "segment range [{s},{e}) out of bounds for T={t}"
                )));
            }
        }
        let xv = self.value(x);
        let mut data = vec![0.0; ranges.len() * d];
        for (n, &(s, e)) in ranges.iter().enumerate() {
            let len = (e - s) as f64;
            for ti in s..e {
                for j in 0..d {
                    data[n * d + j] += xv.at(ti, j) / len;
                }
            }
        }
        let out = Tensor::new(vec![ranges.len(), d], data)?;
        self.push(
            out,
            Op::SegmentPool {
                input: x.0,
                ranges: ranges.to_vec(),
            },
            &[x],
        )
    }

    /// Scatter one row per range back onto a `t`-row timeline. Overlapping
    /// ranges sum; rows outside every range are zero.
    pub fn segment_broadcast(
        &mut self,
        x: Value,
        ranges: &[(usize, usize)],
        t: usize,
    ) -> Result<Value> {
        let (n_rows, d) = self.value(x).expect_matrix()?;
        if n_rows != ranges.len() {
            return Err(Error::Dimension(format!(
                "{n_rows} rows against {} ranges",
                ranges.len()
            )));
        }
        for &(s, e) in ranges {
            if s >= e || e > t {
                return Err(Error::Contract(format!(
                    "segment range [{s},{e}) out of bounds for T={t}"
                )));
            }
        }
        let xv = self.value(x);
        let mut data = vec![0.0; t * d];
        for (n, &(s, e)) in ranges.iter().enumerate() {
            for ti in s..e {
                for j in 0..d {
                    data[ti * d + j] += xv.at(n, j);
                }
            }
        }
        let out = Tensor::new(vec![t, d], data)?;
        self.push(
            out,
            Op::SegmentBroadcast {
                input: x.0,
                ranges: ranges.to_vec(),
            },
            &[x],
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        let (m, n) = self.value(a).expect_matrix()?;
        if start >= end || end > n {
            return Err(Error::Dimension(format!(
                "column slice [{start},{end}) of {m}x{n} matrix"
            )));
        }
        let src = self.value(a);
        let w = end - start;
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&src.row(i)[start..end]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        self.push(
            out,
            Op::SliceCols {
                input: a.0,
                start,
                end,
            },
            &[a],
        )
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Value]) -> Result<Value> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).expect_matrix()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = self.value(p).expect_matrix()?;
            if mi != m {
                return Err(Error::Dimension("concat_cols row count mismatch".into()));
            }
            widths.push(ni);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let src = self.value(p);
            for i in 0..m {
                data[i * total + off..i * total + off + widths[idx]]
                    .copy_from_slice(src.row(i));
            }
            off += widths[idx];
        }
        let out = Tensor::new(vec![m, total], data)?;
        let ids = parts.iter().map(|v| v.0).collect();
        self.push(out, Op::ConcatCols(ids), parts)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are *added* into every
    /// reachable `leaf_grad` node, so repeated calls accumulate.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let dz = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &dz, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, d) in acc.data_mut().iter_mut().zip(dz.data()) {
                            *a += d;
                        }
                    }
                    None => node.grad = Some(dz),
                }
            }
        }
        Ok(())
    }

    /// Clear accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn propagate(&self, id: usize, dz: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        let node = &self.nodes[id];
        let add_to = |grads: &mut Vec<Option<Tensor>>, target: usize, delta: &Tensor| {
            if !self.nodes[target].requires_grad {
                return;
            }
            match &mut grads[target] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta.clone()),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, dz);
                add_to(grads, *b, dz);
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, dz);
                let neg = map_like(dz, |v| -v);
                add_to(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_to(grads, *a, &zip_like(dz, bv, |d, y| d * y));
                add_to(grads, *b, &zip_like(dz, av, |d, x| d * x));
            }
            Op::Div(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_to(grads, *a, &zip_like(dz, bv, |d, y| d / y));
                let mut db = dz.clone();
                for ((g, x), y) in db.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                    *g = -*g * x / (y * y);
                }
                add_to(grads, *b, &db);
            }
            Op::Scale(a, c) => {
                add_to(grads, *a, &map_like(dz, |v| v * c));
            }
            Op::AddScalar(a) => add_to(grads, *a, dz),
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                add_to(grads, *a, &zip_like(dz, x, |d, v| if v > 0.0 { d } else { 0.0 }));
            }
            Op::Exp(a) => {
                add_to(grads, *a, &zip_like(dz, &node.value, |d, y| d * y));
            }
            Op::Log(a) => {
                let x = &self.nodes[*a].value;
                add_to(grads, *a, &zip_like(dz, x, |d, v| d / v));
            }
            Op::Sqrt(a) => {
                add_to(grads, *a, &zip_like(dz, &node.value, |d, y| d / (2.0 * y)));
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_to(grads, *a, &matmul_nt(dz, bv));
                add_to(grads, *b, &matmul_tn(av, dz));
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut da = Tensor::zeros(vec![n, m]);
                for i in 0..m {
                    for j in 0..n {
                        *da.at_mut(j, i) = dz.at(i, j);
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                let da = Tensor::new(shape, dz.data().to_vec()).expect("reshape grad");
                add_to(grads, *a, &da);
            }
            Op::AddBiasRow(a, bias) => {
                add_to(grads, *a, dz);
                let (m, n) = (dz.rows(), dz.cols());
                let mut db = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        db[j] += dz.at(i, j);
                    }
                }
                add_to(grads, *bias, &Tensor::vector(db));
            }
            Op::BroadcastRows(v) => {
                let (m, n) = (dz.rows(), dz.cols());
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += dz.at(i, j);
                    }
                }
                add_to(grads, *v, &Tensor::vector(dv));
            }
            Op::MulColumn(a, col) => {
                let (av, cv) = (&self.nodes[*a].value, &self.nodes[*col].value);
                let (m, n) = (dz.rows(), dz.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                let mut dc = vec![0.0; m];
                for i in 0..m {
                    let w = cv.data()[i];
                    for j in 0..n {
                        *da.at_mut(i, j) = dz.at(i, j) * w;
                        dc[i] += dz.at(i, j) * av.at(i, j);
                    }
                }
                add_to(grads, *a, &da);
                add_to(grads, *col, &Tensor::vector(dc));
            }
            Op::Softmax { input, axis } => {
                let y = &node.value;
                let (slices, slice_len, stride, base_stride) =
                    softmax_layout(y.shape(), *axis).expect("softmax layout");
                let mut da = Tensor::zeros(y.shape().to_vec());
                for s in 0..slices {
                    let base = s * base_stride;
                    let mut dot = 0.0;
                    for i in 0..slice_len {
                        let idx = base + i * stride;
                        dot += dz.data()[idx] * y.data()[idx];
                    }
                    for i in 0..slice_len {
                        let idx = base + i * stride;
                        da.data_mut()[idx] = y.data()[idx] * (dz.data()[idx] - dot);
                    }
                }
                add_to(grads, *input, &da);
            }
            Op::SumAll(a) => {
                let d = dz.data()[0];
                let src = &self.nodes[*a].value;
                add_to(grads, *a, &Tensor::full(src.shape().to_vec(), d));
            }
            Op::MeanAll(a) => {
                let src = &self.nodes[*a].value;
                let d = dz.data()[0] / src.numel() as f64;
                add_to(grads, *a, &Tensor::full(src.shape().to_vec(), d));
            }
            Op::SumAxis1(a) => {
                let src = &self.nodes[*a].value;
                let (m, n) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for j in 0..n {
                        *da.at_mut(i, j) = dz.data()[i];
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::MeanAxis0(a) => {
                let src = &self.nodes[*a].value;
                let (m, n) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for j in 0..n {
                        *da.at_mut(i, j) = dz.data()[j] / m as f64;
                    }
                }
                add_to(grads, *a, &da);
            }
            Op::TopkMeanCols { input, k, selected } => {
                let src = &self.nodes[*input].value;
                let (m, n) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                for j in 0..n {
                    for &i in &selected[j] {
                        *da.at_mut(i, j) += dz.data()[j] / *k as f64;
                    }
                }
                add_to(grads, *input, &da);
            }
            Op::Conv1d { x, kernel, bias, width } => {
                let xv = &self.nodes[*x].value;
                let kv = &self.nodes[*kernel].value;
                let (t, din) = (xv.rows(), xv.cols());
                let dout = kv.shape()[2];
                let half = width / 2;
                let mut dx = Tensor::zeros(vec![t, din]);
                let mut dk = Tensor::zeros(kv.shape().to_vec());
                let mut db = vec![0.0; dout];
                for ti in 0..t {
                    for o in 0..dout {
                        let g = dz.at(ti, o);
                        db[o] += g;
                        for w in 0..*width {
                            let src = ti as isize + w as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for c in 0..din {
                                let kidx = (w * din + c) * dout + o;
                                dx.data_mut()[src * din + c] += g * kv.data()[kidx];
                                dk.data_mut()[kidx] += g * xv.at(src, c);
                            }
                        }
                    }
                }
                add_to(grads, *x, &dx);
                add_to(grads, *kernel, &dk);
                add_to(grads, *bias, &Tensor::vector(db));
            }
            Op::InterpRows { input, positions } => {
                let src = &self.nodes[*input].value;
                let (t, d) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(vec![t, d]);
                for (i, &p) in positions.iter().enumerate() {
                    let (lo, hi, frac) = interp_endpoints(p, t);
                    for j in 0..d {
                        da.data_mut()[lo * d + j] += (1.0 - frac) * dz.at(i, j);
                        da.data_mut()[hi * d + j] += frac * dz.at(i, j);
                    }
                }
                add_to(grads, *input, &da);
            }
            Op::MaskedSoftmaxRows { input, mask } => {
                let y = &node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut da = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let row_mask = &mask[i * n..(i + 1) * n];
                    if !row_mask.iter().any(|&b| b) {
                        continue;
                    }
                    let mut dot = 0.0;
                    for j in 0..n {
                        if row_mask[j] {
                            dot += dz.at(i, j) * y.at(i, j);
                        }
                    }
                    for j in 0..n {
                        if row_mask[j] {
                            *da.at_mut(i, j) = y.at(i, j) * (dz.at(i, j) - dot);
                        }
                    }
                }
                add_to(grads, *input, &da);
            }
            Op::SegmentPool { input, ranges } => {
                let src = &self.nodes[*input].value;
                let (t, d) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(vec![t, d]);
                for (n_idx, &(s, e)) in ranges.iter().enumerate() {
                    let len = (e - s) as f64;
                    for ti in s..e {
                        for j in 0..d {
                            da.data_mut()[ti * d + j] += dz.at(n_idx, j) / len;
                        }
                    }
                }
                add_to(grads, *input, &da);
            }
            Op::SegmentBroadcast { input, ranges } => {
                let src = &self.nodes[*input].value;
                let (n_rows, d) = (src.rows(), src.cols());
                let mut da = Tensor::zeros(vec![n_rows, d]);
                for (n_idx, &(s, e)) in ranges.iter().enumerate() {
                    for ti in s..e {
                        for j in 0..d {
                            da.data_mut()[n_idx * d + j] += dz.at(ti, j);
                        }
                    }
                }
                add_to(grads, *input, &da);
            }
            Op::SliceCols { input, start, end } => {
                let src = &self.nodes[*input].value;
                let (m, n) = (src.rows(), src.cols());
                let w = end - start;
                let mut da = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    for j in 0..w {
                        *da.at_mut(i, start + j) = dz.at(i, j);
                    }
                }
                add_to(grads, *input, &da);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut dp = Tensor::zeros(vec![m, w]);
                    for i in 0..m {
                        for j in 0..w {
                            *dp.at_mut(i, j) = dz.at(i, off + j);
                        }
                    }
                    add_to(grads, p, &dp);
                    off += w;
                }
            }
        }
    }
}

// ── raw helpers ─────────────────────────────────────────────────────────

fn map_like(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("map_like")
}

fn zip_like(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_like")
}

fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.at(i, p);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data_mut()[i * n + j] += av * b.at(p, j);
            }
        }
    }
    out
}

/// dz · bᵀ
fn matmul_nt(dz: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (dz.rows(), dz.cols());
    let k = b.rows();
    let mut out = Tensor::zeros(vec![m, k]);
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            for j in 0..n {
                acc += dz.at(i, j) * b.at(p, j);
            }
            out.data_mut()[i * k + p] = acc;
        }
    }
    out
}

/// aᵀ · dz
fn matmul_tn(a: &Tensor, dz: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let n = dz.cols();
    let mut out = Tensor::zeros(vec![k, n]);
    for i in 0..m {
        for p in 0..k {
            let av = a.at(i, p);
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data_mut()[p * n + j] += av * dz.at(i, j);
            }
        }
    }
    out
}

/// Returns (number of slices, slice length, element stride, slice base stride).
fn softmax_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize, usize)> {
    match (shape.len(), axis) {
        (1, 0) => {
            if shape[0] == 0 {
                return Err(Error::Dimension("softmax over empty axis".into()));
            }
            Ok((1, shape[0], 1, 0))
        }
        (2, 1) => {
            if shape[1] == 0 {
                return Err(Error::Dimension("softmax over empty axis".into()));
            }
            Ok((shape[0], shape[1], 1, shape[1]))
        }
        (2, 0) => {
            if shape[0] == 0 {
                return Err(Error::Dimension("softmax over empty axis".into()));
            }
            Ok((shape[1], shape[0], shape[1], 1))
        }
        _ => Err(Error::Dimension(format!(
            "softmax axis {axis} on shape {shape:?}"
        ))),
    }
}

fn softmax_slice(data: &mut [f64], base: usize, len: usize, stride: usize) {
    let mut mx = f64::NEG_INFINITY;
    for i in 0..len {
        mx = mx.max(data[base + i * stride]);
    }
    let mut denom = 0.0;
    for i in 0..len {
        let e = math::exp(data[base + i * stride] - mx);
        data[base + i * stride] = e;
        denom += e;
    }
    for i in 0..len {
        data[base + i * stride] /= denom;
    }
}

/// Floor/ceil row indices and fractional weight for a real row position,
/// clamped to `[0, t-1]`.
fn interp_endpoints(p: f64, t: usize) -> (usize, usize, f64) {
    let p = p.clamp(0.0, (t - 1) as f64);
    let lo = math::floor(p) as usize;
    let hi = (lo + 1).min(t - 1);
    (lo, hi, p - lo as f64)
}
