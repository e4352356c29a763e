//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its backward rule. Nodes are only ever appended, so the tape
//! is topologically ordered by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! ```
//! use sticker_core::numcore::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[6.0]);
//! ```

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    MeanOverRows(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    PickPerRow { x: Var, idx: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar seed with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when the seed does not depend on it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// `c = op(a)·op(b) + beta·c` for logical shapes `m×k` and `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical shapes and
    // the strides address exactly those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = 1.0 - 2.0 / (1.0 + (2.0 * u).exp());
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of `v`; intended for 1×1 results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a.0].value.shape().to_vec(),
            rhs: self.nodes[b.0].value.shape().to_vec(),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::MatMul { a, b, trans_b: false },
            rg,
        ))
    }

    /// `a·bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::MatMul { a, b, trans_b: true },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiplies by a constant tensor of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let m = self.constant(mask);
        self.mul(a, m)
    }

    fn broadcast_row(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(row).numel() != c {
            return Err(self.shape_err(name, a, row));
        }
        let rv = self.value(row).data();
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(av[i * c..(i + 1) * c].iter().zip(rv).map(|(&x, &y)| f(x, y)));
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, op, rg))
    }

    /// Adds a `1×c` row to every row of `a` (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("add_row", a, row, |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row (gain).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.broadcast_row("mul_row", a, row, |x, y| x * y, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]` for an `r×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(col).numel() != r {
            return Err(self.shape_err("mul_col", a, col));
        }
        let cv = self.value(col).data();
        let av = self.value(a).data();
        let data = av
            .iter()
            .enumerate()
            .map(|(idx, &x)| x * cv[idx / c])
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Degenerate(format!("ln of non-positive value {bad}")));
        }
        Ok(self.unary(x, f64::ln, Op::Ln(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu(v).0, Op::Gelu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    // ---- row-wise normalizers ---------------------------------------------

    /// Softmax along the last axis (`axis = 1`) or down columns (`axis = 0`).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax_rows(x)),
            0 => {
                let t = self.transpose(x);
                let s = self.softmax_rows(t);
                Ok(self.transpose(s))
            }
            _ => Err(Error::validation(format!("softmax axis {axis} out of range"))),
        }
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = src.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(src.row(i), &mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = src.dims2();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        if c < 2 {
            return Err(Error::validation("layer_norm needs a last axis of length >= 2"));
        }
        let mut out = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(row.iter().map(|v| (v - mean) * is));
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::LayerNorm { x, inv_std }, rg))
    }

    /// Layer normalization with a `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.layer_norm_rows(x, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = src.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 1e-12) {
                return Err(Error::Degenerate(format!("row {i} has norm {n}")));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Row-wise cosine similarity of two same-shape matrices, as an `r×1` column.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dims2() != self.value(b).dims2() {
            return Err(self.shape_err("cosine", a, b));
        }
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let p = self.mul(na, nb)?;
        Ok(self.row_sums(p))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `r×c → r×1` sums along each row.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, _) = t.dims2();
        let data = (0..r).map(|i| t.row(i).iter().sum()).collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(r, 1, data), Op::RowSums(x), rg)
    }

    /// `r×c → 1×c` average of the rows.
    pub fn mean_over_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = t.dims2();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(t.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::matrix(1, c, data), Op::MeanOverRows(x), rg)
    }

    /// Sum of several same-shape nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::validation("add_n of nothing"))?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    // ---- indexing -------------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if len == 0 || start + len > c {
            return Err(Error::validation(format!(
                "slice_cols {start}..{} of {c} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(r, len, data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if len == 0 || start + len > r {
            return Err(Error::validation(format!(
                "slice_rows {start}..{} of {r} rows",
                start + len
            )));
        }
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(len, c, data),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::validation("concat_cols of nothing"))?;
        let r = self.value(first).rows();
        let mut total = 0;
        for &x in xs {
            if self.value(x).rows() != r {
                return Err(self.shape_err("concat_cols", first, x));
            }
            total += self.value(x).cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(
            Tensor::matrix(r, total, data),
            Op::ConcatCols(xs.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::validation("concat_rows of nothing"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        for &x in xs {
            if self.value(x).cols() != c {
                return Err(self.shape_err("concat_rows", first, x));
            }
            data.extend_from_slice(self.value(x).data());
        }
        let r = data.len() / c;
        let rg = self.rg(xs);
        Ok(self.push(Tensor::matrix(r, c, data), Op::ConcatRows(xs.to_vec()), rg))
    }

    /// Row lookup (embedding tables); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if idx.is_empty() {
            return Err(Error::validation("gather_rows with no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::validation(format!("row index {i} out of range for {r} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(idx.len(), c, data),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[i, idx[i]]` for each row, giving an `r×1` column.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if idx.len() != r {
            return Err(Error::validation(format!(
                "pick_per_row needs {r} indices, got {}",
                idx.len()
            )));
        }
        let mut data = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            if j >= c {
                return Err(Error::validation(format!("column {j} out of range for {c}")));
            }
            data.push(t.get(i, j));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(r, 1, data),
            Op::PickPerRow {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention applied independently to
    /// each consecutive block of `seq_len` rows. `q`, `k`, `v` are all
    /// `(B·seq_len)×d`; heads split the columns and are concatenated back.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.dims(q);
        if self.dims(k) != (rows, d) {
            return Err(self.shape_err("block_attention", q, k));
        }
        if self.dims(v) != (rows, d) {
            return Err(self.shape_err("block_attention", q, v));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::validation(format!(
                "{rows} rows do not split into blocks of {seq_len}"
            )));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {n_heads} heads"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let l = seq_len;
        let mut probs = vec![0.0; (rows / l) * n_heads * l * l];
        let mut out = vec![0.0; rows * d];
        for (bh, p) in probs.chunks_mut(l * l).enumerate() {
            let (b, h) = (bh / n_heads, bh % n_heads);
            let (r0, c0) = (b * l, h * dh);
            for i in 0..l {
                let qi = &qv[(r0 + i) * d + c0..][..dh];
                let row = &mut p[i * l..(i + 1) * l];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kv[(r0 + j) * d + c0..][..dh];
                    *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let oi = &mut out[(r0 + i) * d + c0..][..dh];
                for (j, s) in row.iter_mut().enumerate() {
                    *s /= sum;
                    let vj = &vv[(r0 + j) * d + c0..][..dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += *s * x;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(rows, d, out),
            Op::BlockAttention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
            },
            rg,
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `seed`; returns gradients for every leaf
    /// created with `requires_grad = true` that the seed depends on.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let seed_value = &self.nodes[seed.0].value;
        if seed_value.numel() != 1 {
            return Err(Error::validation(format!(
                "backward seed must be a scalar, got shape {:?}",
                seed_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(seed.0 + 1);
        grads.resize_with(seed.0 + 1, || None);
        grads[seed.0] = Some(vec![1.0]);

        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }

        for (i, slot) in grads.iter_mut().enumerate() {
            let node = &self.nodes[i];
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].value.numel();
        accumulate(&mut grads[v.0], len)
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, n) = out.dims2();
                let k = self.value(*a).cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let da = self.grad_buf(grads, *a);
                    // a·b: dA = dC·bᵀ ; a·bᵀ: dA = dC·b
                    gemm(m, n, k, g, false, bv, !*trans_b, da, 1.0);
                }
                if self.wants(*b) {
                    let db = self.grad_buf(grads, *b);
                    if *trans_b {
                        gemm(n, m, k, g, true, av, false, db, 1.0);
                    } else {
                        gemm(k, m, n, av, true, g, false, db, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let d = self.grad_buf(grads, v);
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    let d = self.grad_buf(grads, *a);
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if self.wants(*b) {
                    let d = self.grad_buf(grads, *b);
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let d = self.grad_buf(grads, *a);
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let d = self.grad_buf(grads, *b);
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let c = out.cols();
                if self.wants(*a) {
                    let d = self.grad_buf(grads, *a);
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if self.wants(*row) {
                    let d = self.grad_buf(grads, *row);
                    for chunk in g.chunks(c) {
                        d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = out.cols();
                if self.wants(*a) {
                    let rv = self.value(*row).data();
                    let d = self.grad_buf(grads, *a);
                    for (dchunk, gchunk) in d.chunks_mut(c).zip(g.chunks(c)) {
                        for ((d, g), r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d += g * r;
                        }
                    }
                }
                if self.wants(*row) {
                    let av = self.value(*a).data();
                    let d = self.grad_buf(grads, *row);
                    for (achunk, gchunk) in av.chunks(c).zip(g.chunks(c)) {
                        for ((d, g), x) in d.iter_mut().zip(gchunk).zip(achunk) {
                            *d += g * x;
                        }
                    }
                }
            }
            Op::MulCol(a, col) => {
                let c = out.cols();
                if self.wants(*a) {
                    let cv = self.value(*col).data();
                    let d = self.grad_buf(grads, *a);
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g * cv[i / c];
                    }
                }
                if self.wants(*col) {
                    let av = self.value(*a).data();
                    let d = self.grad_buf(grads, *col);
                    for (i, (g, x)) in g.iter().zip(av).enumerate() {
                        d[i / c] += g * x;
                    }
                }
            }
            Op::Scale(x, c) => {
                let d = self.grad_buf(grads, *x);
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let d = self.grad_buf(grads, *x);
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Exp(x) => {
                let d = self.grad_buf(grads, *x);
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y;
                }
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let d = self.grad_buf(grads, *x);
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g / x;
                }
            }
            Op::Sigmoid(x) => {
                let d = self.grad_buf(grads, *x);
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Tanh(x) => {
                let d = self.grad_buf(grads, *x);
                for ((d, g), y) in d.iter_mut().zip(g).zip(out.data()) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d = self.grad_buf(grads, *x);
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    *d += g * gelu(*x).1;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let d = self.grad_buf(grads, *x);
                for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                    if x >= lo && x <= hi {
                        *d += g;
                    }
                }
            }
            Op::BlockAttention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
            } => {
                let (rows, d) = out.dims2();
                let (l, dh) = (*seq_len, d / n_heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; rows * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut ds = vec![0.0; l];
                for (bh, p) in probs.chunks(l * l).enumerate() {
                    let (b, h) = (bh / n_heads, bh % n_heads);
                    let (r0, c0) = (b * l, h * dh);
                    for i in 0..l {
                        let gi = &g[(r0 + i) * d + c0..][..dh];
                        let pi = &p[i * l..(i + 1) * l];
                        // dP = dO·Vᵀ, then the softmax Jacobian
                        let mut dot = 0.0;
                        for (j, dsj) in ds.iter_mut().enumerate() {
                            let vj = &vv[(r0 + j) * d + c0..][..dh];
                            *dsj = gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                            dot += *dsj * pi[j];
                        }
                        for (j, dsj) in ds.iter_mut().enumerate() {
                            *dsj = scale * pi[j] * (*dsj - dot);
                        }
                        let qi = &qv[(r0 + i) * d + c0..][..dh];
                        for j in 0..l {
                            let o = (r0 + j) * d + c0;
                            for c in 0..dh {
                                dv[o + c] += pi[j] * gi[c];
                                dk[o + c] += ds[j] * qi[c];
                                dq[(r0 + i) * d + c0 + c] += ds[j] * kv[o + c];
                            }
                        }
                    }
                }
                for (var, dx) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        let d = self.grad_buf(grads, var);
                        d.iter_mut().zip(&dx).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                let d = self.grad_buf(grads, *x);
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                let d = self.grad_buf(grads, *x);
                for ((dr, gr), yr) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += g - y.exp() * gsum;
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let c = out.cols();
                let n = c as f64;
                let d = self.grad_buf(grads, *x);
                for (((dr, gr), yr), is) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data().chunks(c))
                    .zip(inv_std)
                {
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n;
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += is * (g - gmean - y * gy);
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                let c = out.cols();
                let d = self.grad_buf(grads, *x);
                for (((dr, gr), yr), n) in d
                    .chunks_mut(c)
                    .zip(g.chunks(c))
                    .zip(out.data().chunks(c))
                    .zip(norms)
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d += (g - y * dot) / n;
                    }
                }
            }
            Op::Sum(x) => {
                let d = self.grad_buf(grads, *x);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let d = self.grad_buf(grads, *x);
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
            Op::RowSums(x) => {
                let c = self.value(*x).cols();
                let d = self.grad_buf(grads, *x);
                for (dr, g) in d.chunks_mut(c).zip(g) {
                    dr.iter_mut().for_each(|d| *d += g);
                }
            }
            Op::MeanOverRows(x) => {
                let (r, c) = self.value(*x).dims2();
                let d = self.grad_buf(grads, *x);
                for dr in d.chunks_mut(c) {
                    for (d, g) in dr.iter_mut().zip(g) {
                        *d += g / r as f64;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let len = out.cols();
                let d = self.grad_buf(grads, *x);
                for (dr, gr) in d.chunks_mut(c).zip(g.chunks(len)) {
                    dr[*start..start + len]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let d = self.grad_buf(grads, *x);
                d[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g);
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let mut offset = 0;
                for &x in xs {
                    let c = self.value(x).cols();
                    if self.wants(x) {
                        let d = self.grad_buf(grads, x);
                        for (dr, gr) in d.chunks_mut(c).zip(g.chunks(total)) {
                            dr.iter_mut()
                                .zip(&gr[offset..offset + c])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if self.wants(x) {
                        let d = self.grad_buf(grads, x);
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                let d = self.grad_buf(grads, *x);
                for (&i, gr) in idx.iter().zip(g.chunks(c)) {
                    d[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::PickPerRow { x, idx } => {
                let c = self.value(*x).cols();
                let d = self.grad_buf(grads, *x);
                for (i, (&j, g)) in idx.iter().zip(g).enumerate() {
                    d[i * c + j] += g;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = out.dims2();
                let d = self.grad_buf(grads, *x);
                // out is r×c, input is c×r
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_and_product_rules() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let y = t.leaf(Tensor::scalar(5.0), true);
        let z = t.mul(x, y).unwrap();
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0]);
        assert_eq!(g.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 2), true);
        assert!(matches!(t.backward(x), Err(Error::Validation(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]));
        let v = t.constant(Tensor::matrix(2, 1, vec![3., 4.]));
        let p = t.matmul(i, v).unwrap();
        assert_eq!(t.value(p).data(), &[3., 4.]);

        let a = t.constant(Tensor::matrix(1, 2, vec![1., 2.]));
        let b = t.constant(Tensor::matrix(2, 1, vec![3., 4.]));
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0), true);
        let y = t.leaf(Tensor::scalar(2.0), true);
        let z = t.scale(x, 4.0);
        let g = t.backward(z).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0]);
        assert!(g.get(y).is_none());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let s = t.softmax(x, 1).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);

        let x = t.constant(Tensor::row_vector(vec![1f64.ln(), 3f64.ln()]));
        let s = t.softmax(x, 1).unwrap();
        let v = t.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let a = t.constant(Tensor::row_vector(vec![5.0, 5.0, 5.0]));
        let b = t.constant(Tensor::row_vector(vec![0.0, 0.0, 0.0]));
        let sa = t.softmax(a, 1).unwrap();
        let sb = t.softmax(b, 1).unwrap();
        assert_eq!(t.value(sa).data(), t.value(sb).data());
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 3.0]));
        let s = t.softmax(x, 0).unwrap();
        let v = t.value(s);
        assert!((v.get(0, 0) + v.get(1, 0) - 1.0).abs() < 1e-12);
        assert!((v.get(0, 1) + v.get(1, 1) - 1.0).abs() < 1e-12);
        assert!(t.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row_vector(vec![1.0, 3.0]));
        let y = t.layer_norm_rows(x, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 1.0]);

        let x = t.constant(Tensor::row_vector(vec![2.5; 4]));
        let gain = t.constant(Tensor::row_vector(vec![1.0; 4]));
        let bias = t.constant(Tensor::row_vector(vec![0.0; 4]));
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-12));

        let x = t.constant(Tensor::row_vector(vec![1.0]));
        assert!(t.layer_norm_rows(x, 1e-5).is_err());
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(1, 3));
        assert!(matches!(t.normalize_rows(x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]), true);
        let g = t.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(g).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = t.sum(g);
        let grads = t.backward(s).unwrap();
        assert_eq!(grads.get(table).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }
}
