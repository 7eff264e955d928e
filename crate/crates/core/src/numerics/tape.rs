//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Operations are appended to a [`Tape`] in evaluation order, which makes the
//! node list a topological order by construction. [`Tape::backward`] walks it
//! once in reverse.

use std::borrow::Cow;
use std::sync::Arc;

use super::matrix::{Matrix, Scalar};
use super::softmax_masked_grid;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Silu(Var),
    SoftmaxMasked(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Block {
        src: Var,
        r0: usize,
        c0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SumSquares(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
}

/// Ordered record of primitive operations.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.push(Cow::Owned(value), op)
    }

    /// Registers a borrowed leaf, typically a model parameter.
    pub fn leaf(&mut self, value: &'a Matrix<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    /// Registers an owned leaf, typically an input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.owned(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.owned(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.owned(out, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.owned(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.owned(out, Op::Sub(a, b)))
    }

    /// Adds the `1 x n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.owned(out, Op::AddRow(a, bias)))
    }

    /// `a·w + b` with a row-vector bias.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(a, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).scale(k);
        self.owned(out, Op::Scale(a, k))
    }

    /// Multiplies row `r` by `k[r]`.
    pub fn scale_rows(&mut self, a: Var, k: Vec<T>) -> Result<Var> {
        let mut out = self.value(a).clone();
        if k.len() != out.rows() {
            return Err(Error::Shape(format!(
                "{} row factors for {} rows",
                k.len(),
                out.rows()
            )));
        }
        for (r, &f) in k.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.owned(out, Op::ScaleRows(a, k)))
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.owned(out, Op::Silu(a))
    }

    /// Row softmax over the columns where `grid` is 0; blocked entries are
    /// exactly zero.
    pub fn softmax_masked(&mut self, a: Var, grid: &Arc<Vec<u8>>) -> Result<Var> {
        let out = softmax_masked_grid(self.value(a), grid)?;
        Ok(self.owned(out, Op::SoftmaxMasked(a)))
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be 1x{cols}, got {:?}/{:?}",
                g.shape(),
                b.shape()
            )));
        }
        let n = T::from_usize(cols).unwrap();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        Ok(self.owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// The `nr x nc` block of `src` at `(r0, c0)`.
    pub fn block(&mut self, src: Var, r0: usize, c0: usize, nr: usize, nc: usize) -> Result<Var> {
        let out = self.value(src).block(r0, c0, nr, nc)?;
        Ok(self.owned(out, Op::Block { src, r0, c0 }))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.value(src).cols();
        self.block(src, start, 0, len, cols)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_rows(&mats)?;
        Ok(self.owned(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::concat_cols(&mats)?;
        Ok(self.owned(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Selects rows by index (repeats allowed); gradients scatter-add back.
    pub fn gather_rows(&mut self, src: Var, idx: Vec<usize>) -> Result<Var> {
        let out = self.value(src).gather_rows(&idx)?;
        Ok(self.owned(out, Op::GatherRows(src, idx)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.owned(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_squares();
        self.owned(Matrix::filled(1, 1, s), Op::SumSquares(a))
    }

    /// Propagates d(loss)/d(node) to every node that `loss` depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-T::one()))?;
                }
                Op::AddRow(a, bias) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *bias, g.col_sums())?;
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g.scale(*k))?,
                Op::ScaleRows(a, k) => {
                    let mut d = g.clone();
                    for (r, &f) in k.iter().enumerate() {
                        d.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(&mut grads, *a, d)?
                }
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut gx = g.clone();
                    for (gv, &xv) in gx.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        let s = T::one() / (T::one() + (-xv).exp());
                        *gv *= s * (T::one() + xv * (T::one() - s));
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::SoftmaxMasked(a) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = xhat.shape();
                    let n = T::from_usize(cols).unwrap();
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut dxhat = vec![T::zero(); cols];
                    for r in 0..rows {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for c in 0..cols {
                            ggain.as_mut_slice()[c] += gr[c] * hr[c];
                            dxhat[c] = gr[c] * gv.get(0, c);
                            sum_d += dxhat[c];
                            sum_dh += dxhat[c] * hr[c];
                        }
                        let k = inv_std[r] / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = k * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gain, ggain)?;
                    accumulate(&mut grads, *bias, g.col_sums())?;
                }
                Op::Block { src, r0, c0 } => {
                    let shape = self.value(*src).shape();
                    let gs = slot(&mut grads, *src, shape);
                    for r in 0..g.rows() {
                        let dst = &mut gs.row_mut(r0 + r)[*c0..*c0 + g.cols()];
                        dst.iter_mut().zip(g.row(r)).for_each(|(o, &v)| *o += v);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let nr = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(start, nr)?)?;
                        start += nr;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let nc = self.value(p).cols();
                        accumulate(&mut grads, p, g.block(0, start, g.rows(), nc)?)?;
                        start += nc;
                    }
                }
                Op::GatherRows(src, idx) => {
                    let shape = self.value(*src).shape();
                    let gs = slot(&mut grads, *src, shape);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::SumSquares(a) => {
                    let k = g.get(0, 0) + g.get(0, 0);
                    accumulate(&mut grads, *a, self.value(*a).scale(k))?;
                }
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn slot<T: Scalar>(
    grads: &mut [Option<Matrix<T>>],
    v: Var,
    shape: (usize, usize),
) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
