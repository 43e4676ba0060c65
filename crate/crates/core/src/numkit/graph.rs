//! Reverse-mode differentiation over an arena tape of matrix operations.
//!
//! Nodes are appended in evaluation order, so the arena index is already a
//! topological order and cycles cannot be expressed. Two backward passes are
//! offered:
//!
//! * [`Graph::backward`] walks the tape with plain matrix arithmetic and
//!   returns gradient values. This is the fast path used for every parameter
//!   update.
//! * [`Graph::grad_graph`] records the backward computation itself as new
//!   nodes, so the resulting gradients can be differentiated again. The
//!   gradient penalty of the critic is built this way.
//!
//! Train-mode batch normalization is one fused op. Its recorded backward
//! rebuilds the batch statistics from primitives, so the penalty can be
//! differentiated through batch statistics as well.

use std::rc::Rc;

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    /// `op(a) * op(b)`, `op` transposing when the flag is set.
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    /// `x * w + b` with `b` broadcast over rows.
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LinComb(Vec<(Var, f64)>),
    /// `x * scale + shift`, both `1 x d` and broadcast over rows.
    RowAffine { x: Var, scale: Option<Var>, shift: Option<Var> },
    /// `a * c` with `c` of shape `n x 1` broadcast over columns.
    MulCol(Var, Var),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastAll(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    /// `g * relu'(x)`; `x` only selects the mask and is not differentiated.
    ReluMask { g: Var, x: Var },
    LeakyMask { g: Var, x: Var, slope: f64 },
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Recip(Var),
    Softmax(Var),
    LogSoftmax(Var),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    PadCols { a: Var, start: usize },
    MaskMul { a: Var, mask: Rc<Matrix> },
    /// Carries an externally supplied value; gradients pass to the operand
    /// unchanged.
    PassThrough(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, eps: f64, xhat: Rc<Matrix>, inv_std: Rc<Vec<f64>> },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Const => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Add(a, b) | Sub(a, b) | Mul(a, b) | MulCol(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | SumRows(a) | SumCols(a) | SumAll(a) | BroadcastRows(a)
            | BroadcastCols(a) | BroadcastAll(a) | Relu(a) | LeakyRelu(a, _) | Tanh(a) | Exp(a)
            | Log(a) | Sqrt(a) | Square(a) | Recip(a) | Softmax(a) | LogSoftmax(a) => vec![*a],
            LinComb(terms) => terms.iter().map(|(v, _)| *v).collect(),
            RowAffine { x, scale, shift } => {
                let mut v = vec![*x];
                v.extend(scale);
                v.extend(shift);
                v
            }
            ReluMask { g, .. } | LeakyMask { g, .. } => vec![*g],
            ConcatCols(parts) => parts.clone(),
            SliceCols { a, .. } | PadCols { a, .. } | MaskMul { a, .. } | PassThrough(a) => vec![*a],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, the one used for normalization.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `mark`. Handles at or above `mark`
    /// become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Rc<Matrix> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.push_rc(Rc::new(value), op, needs_grad)
    }

    fn push_rc(&mut self, value: Rc<Matrix>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Matrix, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn leaf_shared(&mut self, value: Rc<Matrix>, needs_grad: bool) -> Var {
        let op = if needs_grad { Op::Leaf } else { Op::Const };
        self.push_rc(value, op, needs_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_raw(value, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.shared_value(v);
        self.push_rc(value, Op::Const, false)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn row_vector_of(&self, name: &str, r: Var, cols: usize) -> Result<()> {
        if self.shape(r) != (1, cols) {
            return Err(Error::Shape(format!("{name}: expected 1x{cols}, got {:?}", self.shape(r))));
        }
        Ok(())
    }

    // ---- primitive ops -------------------------------------------------

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = super::matrix::gemm(self.value(a), ta, self.value(b), tb)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x * w + b` for `x: n x i`, `w: i x o`, `b: 1 x o`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let mut value = super::matrix::gemm(self.value(x), false, self.value(w), false)?;
        if let Some(b) = b {
            self.row_vector_of("affine bias", b, value.cols())?;
            let bias = self.value(b).data().to_vec();
            for r in 0..value.rows() {
                for (o, bv) in value.row_mut(r).iter_mut().zip(&bias) {
                    *o += bv;
                }
            }
        }
        self.push("affine", value, Op::Affine { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * k);
        self.push("scale", value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + k);
        self.push("add_scalar", value, Op::AddScalar(a))
    }

    /// `Σ k_i * a_i` over same-shaped operands.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::InvalidArgument("empty lincomb".into()))?;
        let shape = self.shape(first);
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, k) in terms {
            if self.shape(v) != shape {
                return Err(Error::Shape(format!("lincomb: {:?} vs {:?}", self.shape(v), shape)));
            }
            if k != 0.0 {
                value.axpy(k, self.value(v));
            }
        }
        self.push("lincomb", value, Op::LinComb(terms.to_vec()))
    }

    pub fn row_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let cols = self.shape(x).1;
        let mut value = self.value(x).clone();
        if let Some(s) = scale {
            self.row_vector_of("row_affine scale", s, cols)?;
            let s = self.value(s).data().to_vec();
            for r in 0..value.rows() {
                for (o, sv) in value.row_mut(r).iter_mut().zip(&s) {
                    *o *= sv;
                }
            }
        }
        if let Some(b) = shift {
            self.row_vector_of("row_affine shift", b, cols)?;
            let b = self.value(b).data().to_vec();
            for r in 0..value.rows() {
                for (o, bv) in value.row_mut(r).iter_mut().zip(&b) {
                    *o += bv;
                }
            }
        }
        self.push("row_affine", value, Op::RowAffine { x, scale, shift })
    }

    pub fn add_row(&mut self, x: Var, shift: Var) -> Result<Var> {
        self.row_affine(x, None, Some(shift))
    }

    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        self.row_affine(x, Some(scale), None)
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (n, d) = self.shape(a);
        if self.shape(c) != (n, 1) {
            return Err(Error::Shape(format!("mul_col: expected {n}x1, got {:?}", self.shape(c))));
        }
        let mut value = self.value(a).clone();
        let cv = self.value(c).data().to_vec();
        for r in 0..n {
            let k = cv[r];
            for o in value.row_mut(r) {
                *o *= k;
            }
        }
        let _ = d;
        self.push("mul_col", value, Op::MulCol(a, c))
    }

    /// Column sums, `n x d -> 1 x d`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sum_rows();
        self.push("sum_rows", value, Op::SumRows(a))
    }

    /// Row sums, `n x d -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).sum_cols();
        self.push("sum_cols", value, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push("sum_all", value, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    /// `1 x d -> n x d`
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, d) = self.shape(a);
        if r != 1 {
            return Err(Error::Shape(format!("broadcast_rows of {r}x{d}")));
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let value = Matrix::from_vec(n, d, data)?;
        self.push("broadcast_rows", value, Op::BroadcastRows(a))
    }

    /// `n x 1 -> n x d`
    pub fn broadcast_cols(&mut self, a: Var, d: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if c != 1 {
            return Err(Error::Shape(format!("broadcast_cols of {n}x{c}")));
        }
        let col = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * d);
        for v in col {
            data.extend(std::iter::repeat_n(v, d));
        }
        let value = Matrix::from_vec(n, d, data)?;
        self.push("broadcast_cols", value, Op::BroadcastCols(a))
    }

    /// `1 x 1 -> rows x cols`
    pub fn broadcast_all(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if self.shape(a) != (1, 1) {
            return Err(Error::Shape(format!("broadcast_all of {:?}", self.shape(a))));
        }
        let value = Matrix::filled(rows, cols, self.value(a).item());
        self.push("broadcast_all", value, Op::BroadcastAll(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push("relu", value, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", value, Op::LeakyRelu(a, slope))
    }

    fn relu_mask(&mut self, g: Var, x: Var) -> Result<Var> {
        let value = self.value(g).zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
        self.push("relu_mask", value, Op::ReluMask { g, x })
    }

    fn leaky_mask(&mut self, g: Var, x: Var, slope: f64) -> Result<Var> {
        let value =
            self.value(g).zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { slope * gv });
        self.push("leaky_mask", value, Op::LeakyMask { g, x, slope })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        self.push("tanh", value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        self.push("exp", value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::ln);
        self.push("log", value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::sqrt);
        self.push("sqrt", value, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x * x);
        self.push("square", value, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push("recip", value, Op::Recip(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a));
        self.push("softmax", value, Op::Softmax(a))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let mut value = src.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row {
                *v -= lse;
            }
        }
        self.push("log_softmax", value, Op::LogSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::hcat(&mats)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let cols = self.shape(a).1;
        if start + len > cols {
            return Err(Error::Shape(format!("slice {start}+{len} of {cols} columns")));
        }
        let value = self.value(a).slice_cols(start, len);
        self.push("slice_cols", value, Op::SliceCols { a, start })
    }

    /// Embeds `a` at column `start` of a zero matrix `total` columns wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (n, c) = self.shape(a);
        if start + c > total {
            return Err(Error::Shape(format!("pad {start}+{c} into {total}")));
        }
        let mut value = Matrix::zeros(n, total);
        let src = self.value(a);
        for r in 0..n {
            value.row_mut(r)[start..start + c].copy_from_slice(src.row(r));
        }
        self.push("pad_cols", value, Op::PadCols { a, start })
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, a: Var, mask: Rc<Matrix>) -> Result<Var> {
        if self.value(a).shape() != mask.shape() {
            return Err(Error::Shape("mask_mul".into()));
        }
        let value = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push("mask_mul", value, Op::MaskMul { a, mask })
    }

    /// Forward value `value`, backward identity into `a`.
    pub fn straight_through(&mut self, a: Var, value: Matrix) -> Result<Var> {
        if value.shape() != self.shape(a) {
            return Err(Error::Shape("straight_through".into()));
        }
        self.push("straight_through", value, Op::PassThrough(a))
    }

    /// Train-mode batch normalization over the rows of `x`. Returns the
    /// output together with the batch statistics so callers can update
    /// running estimates.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, d) = self.shape(x);
        self.row_vector_of("batch_norm gamma", gamma, d)?;
        self.row_vector_of("batch_norm beta", beta, d)?;
        if n == 0 {
            return Err(Error::Shape("batch_norm on an empty batch".into()));
        }
        let xv = self.value(x);
        let mean = xv.sum_rows().into_vec().into_iter().map(|s| s / n as f64).collect::<Vec<_>>();
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((v, &x), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(n, d);
        for r in 0..n {
            for (c, o) in xhat.row_mut(r).iter_mut().enumerate() {
                *o = (xv.get(r, c) - mean[c]) * inv_std[c];
            }
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut value = xhat.clone();
        for r in 0..n {
            for (c, o) in value.row_mut(r).iter_mut().enumerate() {
                *o = *o * gv[c] + bv[c];
            }
        }
        let op = Op::BatchNorm { x, gamma, beta, eps, xhat: Rc::new(xhat), inv_std: Rc::new(inv_std) };
        let out = self.push("batch_norm", value, op)?;
        Ok((out, BatchStats { mean, var }))
    }

    // ---- backward passes ----------------------------------------------

    fn relevance(&self, output: Var, wrt: &[Var]) -> Vec<bool> {
        let mut relevant = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                relevant[w.0] = true;
            }
        }
        let lowest = wrt.iter().map(|w| w.0).min().unwrap_or(usize::MAX);
        for i in lowest.min(output.0 + 1)..=output.0 {
            if !relevant[i] {
                relevant[i] = self.nodes[i].op.parents().iter().any(|p| relevant[p.0]);
            }
        }
        relevant
    }

    /// Gradients of the sum of `output`'s entries with respect to `wrt`.
    /// Unreachable targets get exact zeros.
    pub fn backward(&self, output: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        let out_val = self.value(output);
        if !out_val.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let relevant = self.relevance(output, wrt);
        let mut wanted = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                wanted[w.0] = true;
            }
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        let mut kept: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(out_val.rows(), out_val.cols(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if wanted[i] {
                kept[i] = Some(g.clone());
            }
            if !relevant[i] {
                continue;
            }
            for (p, contrib) in self.vjp_raw(i, &g, &relevant)? {
                match &mut grads[p.0] {
                    Some(acc) => acc.axpy(1.0, &contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                kept.get(w.0).and_then(|k| k.clone()).unwrap_or_else(|| {
                    let (r, c) = self.shape(*w);
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    }

    /// Like [`Graph::backward`] but records the gradient computation on the
    /// tape, so the returned handles are themselves differentiable.
    pub fn grad_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let relevant = self.relevance(output, wrt);
        let mut wanted = vec![false; output.0 + 1];
        for w in wrt {
            if w.0 <= output.0 {
                wanted[w.0] = true;
            }
        }
        let (r, c) = self.shape(output);
        let seed = self.constant(Matrix::filled(r, c, 1.0));
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        let mut kept: Vec<Option<Var>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if wanted[i] {
                kept[i] = Some(g);
            }
            if !relevant[i] {
                continue;
            }
            for (p, contrib) in self.vjp_graph(i, g, &relevant)? {
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match kept.get(w.0).copied().flatten() {
                Some(v) => out.push(v),
                None => {
                    let (r, c) = self.shape(*w);
                    out.push(self.constant(Matrix::zeros(r, c)));
                }
            }
        }
        Ok(out)
    }

    fn vjp_raw(&self, i: usize, g: &Matrix, relevant: &[bool]) -> Result<Vec<(Var, Matrix)>> {
        use Op::*;
        let want = |v: &Var| relevant[v.0];
        let val = |v: Var| self.value(v);
        let y = &self.nodes[i].value;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Leaf | Const => {}
            MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if want(&a) {
                    let ga = if ta {
                        super::matrix::gemm(val(b), tb, g, true)?
                    } else {
                        super::matrix::gemm(g, false, val(b), !tb)?
                    };
                    out.push((a, ga));
                }
                if want(&b) {
                    let gb = if tb {
                        super::matrix::gemm(g, true, val(a), ta)?
                    } else {
                        super::matrix::gemm(val(a), !ta, g, false)?
                    };
                    out.push((b, gb));
                }
            }
            Affine { x, w, b } => {
                if want(x) {
                    out.push((*x, super::matrix::gemm(g, false, val(*w), true)?));
                }
                if want(w) {
                    out.push((*w, super::matrix::gemm(val(*x), true, g, false)?));
                }
                if let Some(b) = b.filter(want) {
                    out.push((b, g.sum_rows()));
                }
            }
            Add(a, b) => {
                if want(a) {
                    out.push((*a, g.clone()));
                }
                if want(b) {
                    out.push((*b, g.clone()));
                }
            }
            Sub(a, b) => {
                if want(a) {
                    out.push((*a, g.clone()));
                }
                if want(b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Mul(a, b) => {
                if want(a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                }
                if want(b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Scale(a, k) => {
                if want(a) {
                    let k = *k;
                    out.push((*a, g.map(|v| v * k)));
                }
            }
            AddScalar(a) => {
                if want(a) {
                    out.push((*a, g.clone()));
                }
            }
            LinComb(terms) => {
                for (v, k) in terms {
                    if want(v) {
                        let k = *k;
                        out.push((*v, g.map(|x| x * k)));
                    }
                }
            }
            RowAffine { x, scale, shift } => {
                if want(x) {
                    let mut gx = g.clone();
                    if let Some(s) = scale {
                        let s = val(*s).data();
                        for r in 0..gx.rows() {
                            for (o, sv) in gx.row_mut(r).iter_mut().zip(s) {
                                *o *= sv;
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if let Some(s) = scale.filter(want) {
                    out.push((s, g.zip_map(val(*x), |a, b| a * b).sum_rows()));
                }
                if let Some(b) = shift.filter(want) {
                    out.push((b, g.sum_rows()));
                }
            }
            MulCol(a, c) => {
                let cv = val(*c).data();
                if want(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let k = cv[r];
                        for o in ga.row_mut(r) {
                            *o *= k;
                        }
                    }
                    out.push((*a, ga));
                }
                if want(c) {
                    out.push((*c, g.zip_map(val(*a), |x, y| x * y).sum_cols()));
                }
            }
            SumRows(a) => {
                if want(a) {
                    let n = val(*a).rows();
                    let rowv = g.data();
                    let mut ga = Matrix::zeros(n, g.cols());
                    for r in 0..n {
                        ga.row_mut(r).copy_from_slice(rowv);
                    }
                    out.push((*a, ga));
                }
            }
            SumCols(a) => {
                if want(a) {
                    let (n, d) = val(*a).shape();
                    let mut ga = Matrix::zeros(n, d);
                    for r in 0..n {
                        let k = g.get(r, 0);
                        ga.row_mut(r).fill(k);
                    }
                    out.push((*a, ga));
                }
            }
            SumAll(a) => {
                if want(a) {
                    let (n, d) = val(*a).shape();
                    out.push((*a, Matrix::filled(n, d, g.item())));
                }
            }
            BroadcastRows(a) => {
                if want(a) {
                    out.push((*a, g.sum_rows()));
                }
            }
            BroadcastCols(a) => {
                if want(a) {
                    out.push((*a, g.sum_cols()));
                }
            }
            BroadcastAll(a) => {
                if want(a) {
                    out.push((*a, Matrix::scalar(g.sum())));
                }
            }
            Relu(a) => {
                if want(a) {
                    out.push((*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })));
                }
            }
            LeakyRelu(a, s) => {
                if want(a) {
                    let s = *s;
                    out.push((*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { s * gv })));
                }
            }
            ReluMask { g: gg, x } => {
                if want(gg) {
                    out.push((*gg, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })));
                }
            }
            LeakyMask { g: gg, x, slope } => {
                if want(gg) {
                    let s = *slope;
                    out.push((*gg, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv })));
                }
            }
            Tanh(a) => {
                if want(a) {
                    out.push((*a, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))));
                }
            }
            Exp(a) => {
                if want(a) {
                    out.push((*a, g.zip_map(y, |gv, yv| gv * yv)));
                }
            }
            Log(a) => {
                if want(a) {
                    out.push((*a, g.zip_map(val(*a), |gv, x| gv / x)));
                }
            }
            Sqrt(a) => {
                if want(a) {
                    // Zero-norm rows get the zero subgradient.
                    out.push((*a, g.zip_map(y, |gv, yv| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 })));
                }
            }
            Square(a) => {
                if want(a) {
                    out.push((*a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)));
                }
            }
            Recip(a) => {
                if want(a) {
                    out.push((*a, g.zip_map(y, |gv, yv| -gv * yv * yv)));
                }
            }
            Softmax(a) => {
                if want(a) {
                    let mut ga = g.zip_map(y, |gv, yv| gv * yv);
                    for r in 0..ga.rows() {
                        let s: f64 = ga.row(r).iter().sum();
                        let yr = y.row(r).to_vec();
                        for (o, yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *o -= yv * s;
                        }
                    }
                    out.push((*a, ga));
                }
            }
            LogSoftmax(a) => {
                if want(a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        let yr = y.row(r).to_vec();
                        for (o, yv) in ga.row_mut(r).iter_mut().zip(yr) {
                            *o -= yv.exp() * s;
                        }
                    }
                    out.push((*a, ga));
                }
            }
            ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if want(p) {
                        out.push((*p, g.slice_cols(start, w)));
                    }
                    start += w;
                }
            }
            SliceCols { a, start } => {
                if want(a) {
                    let (n, total) = val(*a).shape();
                    let mut ga = Matrix::zeros(n, total);
                    for r in 0..n {
                        ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    out.push((*a, ga));
                }
            }
            PadCols { a, start } => {
                if want(a) {
                    out.push((*a, g.slice_cols(*start, val(*a).cols())));
                }
            }
            MaskMul { a, mask } => {
                if want(a) {
                    out.push((*a, g.zip_map(mask, |x, m| x * m)));
                }
            }
            PassThrough(a) => {
                if want(a) {
                    out.push((*a, g.clone()));
                }
            }
            BatchNorm { x, gamma, beta, xhat, inv_std, .. } => {
                let (n, d) = xhat.shape();
                if want(gamma) {
                    out.push((*gamma, g.zip_map(xhat, |a, b| a * b).sum_rows()));
                }
                if want(beta) {
                    out.push((*beta, g.sum_rows()));
                }
                if want(x) {
                    let gam = val(*gamma).data();
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            let dxh = g.get(r, c) * gam[c];
                            sum_dxhat[c] += dxh;
                            sum_dxhat_xhat[c] += dxh * xhat.get(r, c);
                        }
                    }
                    let nf = n as f64;
                    let mut gx = Matrix::zeros(n, d);
                    for r in 0..n {
                        for c in 0..d {
                            let dxh = g.get(r, c) * gam[c];
                            let v = inv_std[c] / nf
                                * (nf * dxh - sum_dxhat[c] - xhat.get(r, c) * sum_dxhat_xhat[c]);
                            gx.set(r, c, v);
                        }
                    }
                    out.push((*x, gx));
                }
            }
        }
        Ok(out)
    }

    fn vjp_graph(&mut self, i: usize, g: Var, relevant: &[bool]) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let want = |v: &Var| relevant[v.0];
        let y = Var(i);
        let op = self.nodes[i].op.clone();
        let mut out = Vec::new();
        match op {
            Leaf | Const => {}
            MatMul { a, b, ta, tb } => {
                if want(&a) {
                    let ga = if ta { self.matmul_t(b, tb, g, true)? } else { self.matmul_t(g, false, b, !tb)? };
                    out.push((a, ga));
                }
                if want(&b) {
                    let gb = if tb { self.matmul_t(g, true, a, ta)? } else { self.matmul_t(a, !ta, g, false)? };
                    out.push((b, gb));
                }
            }
            Affine { x, w, b } => {
                if want(&x) {
                    out.push((x, self.matmul_t(g, false, w, true)?));
                }
                if want(&w) {
                    out.push((w, self.matmul_t(x, true, g, false)?));
                }
                if let Some(b) = b.filter(want) {
                    out.push((b, self.sum_rows(g)?));
                }
            }
            Add(a, b) => {
                if want(&a) {
                    out.push((a, g));
                }
                if want(&b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if want(&a) {
                    out.push((a, g));
                }
                if want(&b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Mul(a, b) => {
                if want(&a) {
                    out.push((a, self.mul(g, b)?));
                }
                if want(&b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Scale(a, k) => {
                if want(&a) {
                    out.push((a, self.scale(g, k)?));
                }
            }
            AddScalar(a) => {
                if want(&a) {
                    out.push((a, g));
                }
            }
            LinComb(terms) => {
                for (v, k) in terms {
                    if want(&v) {
                        out.push((v, self.scale(g, k)?));
                    }
                }
            }
            RowAffine { x, scale, shift } => {
                if want(&x) {
                    let gx = match scale {
                        Some(s) => self.row_affine(g, Some(s), None)?,
                        None => g,
                    };
                    out.push((x, gx));
                }
                if let Some(s) = scale.filter(want) {
                    let gxv = self.mul(g, x)?;
                    out.push((s, self.sum_rows(gxv)?));
                }
                if let Some(b) = shift.filter(want) {
                    out.push((b, self.sum_rows(g)?));
                }
            }
            MulCol(a, c) => {
                if want(&a) {
                    out.push((a, self.mul_col(g, c)?));
                }
                if want(&c) {
                    let ga = self.mul(g, a)?;
                    out.push((c, self.sum_cols(ga)?));
                }
            }
            SumRows(a) => {
                if want(&a) {
                    let n = self.shape(a).0;
                    out.push((a, self.broadcast_rows(g, n)?));
                }
            }
            SumCols(a) => {
                if want(&a) {
                    let d = self.shape(a).1;
                    out.push((a, self.broadcast_cols(g, d)?));
                }
            }
            SumAll(a) => {
                if want(&a) {
                    let (n, d) = self.shape(a);
                    out.push((a, self.broadcast_all(g, n, d)?));
                }
            }
            BroadcastRows(a) => {
                if want(&a) {
                    out.push((a, self.sum_rows(g)?));
                }
            }
            BroadcastCols(a) => {
                if want(&a) {
                    out.push((a, self.sum_cols(g)?));
                }
            }
            BroadcastAll(a) => {
                if want(&a) {
                    out.push((a, self.sum_all(g)?));
                }
            }
            Relu(a) => {
                if want(&a) {
                    out.push((a, self.relu_mask(g, a)?));
                }
            }
            LeakyRelu(a, s) => {
                if want(&a) {
                    out.push((a, self.leaky_mask(g, a, s)?));
                }
            }
            ReluMask { g: gg, x } => {
                if want(&gg) {
                    out.push((gg, self.relu_mask(g, x)?));
                }
            }
            LeakyMask { g: gg, x, slope } => {
                if want(&gg) {
                    out.push((gg, self.leaky_mask(g, x, slope)?));
                }
            }
            Tanh(a) => {
                if want(&a) {
                    let y2 = self.square(y)?;
                    let neg = self.scale(y2, -1.0)?;
                    let d = self.add_scalar(neg, 1.0)?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Exp(a) => {
                if want(&a) {
                    out.push((a, self.mul(g, y)?));
                }
            }
            Log(a) => {
                if want(&a) {
                    let r = self.recip(a)?;
                    out.push((a, self.mul(g, r)?));
                }
            }
            Sqrt(a) => {
                if want(&a) {
                    let r = self.recip(y)?;
                    let h = self.scale(r, 0.5)?;
                    out.push((a, self.mul(g, h)?));
                }
            }
            Square(a) => {
                if want(&a) {
                    let two_a = self.scale(a, 2.0)?;
                    out.push((a, self.mul(g, two_a)?));
                }
            }
            Recip(a) => {
                if want(&a) {
                    let y2 = self.square(y)?;
                    let neg = self.scale(y2, -1.0)?;
                    out.push((a, self.mul(g, neg)?));
                }
            }
            Softmax(a) => {
                if want(&a) {
                    let d = self.shape(a).1;
                    let gy = self.mul(g, y)?;
                    let s = self.sum_cols(gy)?;
                    let sb = self.broadcast_cols(s, d)?;
                    let diff = self.sub(g, sb)?;
                    out.push((a, self.mul(y, diff)?));
                }
            }
            LogSoftmax(a) => {
                if want(&a) {
                    let d = self.shape(a).1;
                    let p = self.exp(y)?;
                    let s = self.sum_cols(g)?;
                    let sb = self.broadcast_cols(s, d)?;
                    let ps = self.mul(p, sb)?;
                    out.push((a, self.sub(g, ps)?));
                }
            }
            ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(p).1;
                    if want(&p) {
                        out.push((p, self.slice_cols(g, start, w)?));
                    }
                    start += w;
                }
            }
            SliceCols { a, start } => {
                if want(&a) {
                    let total = self.shape(a).1;
                    out.push((a, self.pad_cols(g, start, total)?));
                }
            }
            PadCols { a, start } => {
                if want(&a) {
                    let w = self.shape(a).1;
                    out.push((a, self.slice_cols(g, start, w)?));
                }
            }
            MaskMul { a, mask } => {
                if want(&a) {
                    out.push((a, self.mask_mul(g, mask)?));
                }
            }
            PassThrough(a) => {
                if want(&a) {
                    out.push((a, g));
                }
            }
            BatchNorm { x, gamma, beta, eps, .. } => {
                // The statistics are rebuilt from `x` so that they are
                // differentiated again.
                let n = self.shape(x).0;
                let nf = n as f64;
                let s = self.sum_rows(x)?;
                let mean = self.scale(s, 1.0 / nf)?;
                let mean = self.broadcast_rows(mean, n)?;
                let xc = self.sub(x, mean)?;
                let sq = self.square(xc)?;
                let ss = self.sum_rows(sq)?;
                let var = self.scale(ss, 1.0 / nf)?;
                let var = self.add_scalar(var, eps)?;
                let sd = self.sqrt(var)?;
                let inv = self.recip(sd)?;
                let xhat = self.row_affine(xc, Some(inv), None)?;
                let gxh = self.mul(g, xhat)?;
                let sum_gxh = self.sum_rows(gxh)?;
                let sum_g = self.sum_rows(g)?;
                if want(&gamma) {
                    out.push((gamma, sum_gxh));
                }
                if want(&beta) {
                    out.push((beta, sum_g));
                }
                if want(&x) {
                    // gamma * inv / n * (n g - Σg - xhat Σ(g xhat))
                    let ng = self.scale(g, nf)?;
                    let sum_g = self.broadcast_rows(sum_g, n)?;
                    let a = self.sub(ng, sum_g)?;
                    let t = self.row_affine(xhat, Some(sum_gxh), None)?;
                    let a = self.sub(a, t)?;
                    let k = self.mul(gamma, inv)?;
                    let k = self.scale(k, 1.0 / nf)?;
                    out.push((x, self.row_affine(a, Some(k), None)?));
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn softmax_rows(src: &Matrix) -> Matrix {
    let mut value = src.clone();
    for r in 0..value.rows() {
        let row = value.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row {
            *v /= s;
        }
    }
    value
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disconnected_leaf_gets_exact_zero() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::row_vector(&[1.0, 2.0]));
        let b = g.leaf(Matrix::row_vector(&[3.0, 4.0]));
        let s = g.sum_all(a).unwrap();
        let grads = g.backward(s, &[a, b]).unwrap();
        assert_eq!(grads[0].data(), &[1.0, 1.0]);
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intermediate_target_on_constant_inputs() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::row_vector(&[1.0, -2.0]));
        let h = g.scale(a, 3.0).unwrap();
        let y = g.square(h).unwrap();
        let s = g.sum_all(y).unwrap();
        let gh = g.backward(s, &[h]).unwrap();
        assert_eq!(gh[0].data(), &[6.0, -12.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        // y = x^3 -> y' = 3x^2 -> y'' = 6x
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(2.0));
        let x2 = g.square(x).unwrap();
        let y = g.mul(x2, x).unwrap();
        let dy = g.grad_graph(y, &[x]).unwrap()[0];
        assert_eq!(g.value(dy).item(), 12.0);
        let d2 = g.backward(dy, &[x]).unwrap();
        assert_eq!(d2[0].item(), 12.0);
    }

    fn bn_penalty(x: &Matrix, gamma: &Matrix, w: &Matrix) -> (f64, Vec<Matrix>) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let gv = g.leaf(gamma.clone());
        let bv = g.leaf(Matrix::zeros(1, gamma.cols()));
        let (y, _) = g.batch_norm(xv, gv, bv, 1e-5).unwrap();
        let wv = g.constant(w.clone());
        let yw = g.mul(y, wv).unwrap();
        let t = g.tanh(yw).unwrap();
        let s = g.sum_all(t).unwrap();
        let first = g.backward(s, &[xv]).unwrap().pop().unwrap();
        let gx = g.grad_graph(s, &[xv]).unwrap()[0];
        assert!(g.value(gx).max_abs_diff(&first) < 1e-12);
        let sq = g.square(gx).unwrap();
        let q = g.sum_all(sq).unwrap();
        (g.value(q).item(), g.backward(q, &[xv, gv]).unwrap())
    }

    #[test]
    fn recorded_train_batchnorm_backward_is_differentiable() {
        let x = Matrix::from_rows(&[vec![0.3, -1.0], vec![1.2, 0.4], vec![-0.7, 0.9], vec![0.1, 2.0]]);
        let gamma = Matrix::row_vector(&[1.3, 0.6]);
        let w = Matrix::from_rows(&[vec![0.5, -1.1], vec![0.8, 0.2], vec![-0.4, 0.7], vec![1.5, -0.3]]);
        let (_, grads) = bn_penalty(&x, &gamma, &w);
        let eps = 1e-6;
        for (which, base) in [(0, &x), (1, &gamma)] {
            for i in 0..base.len() {
                let mut p = base.clone();
                let mut m = base.clone();
                p.data_mut()[i] += eps;
                m.data_mut()[i] -= eps;
                let (qp, qm) = if which == 0 {
                    (bn_penalty(&p, &gamma, &w).0, bn_penalty(&m, &gamma, &w).0)
                } else {
                    (bn_penalty(&x, &p, &w).0, bn_penalty(&x, &m, &w).0)
                };
                let fd = (qp - qm) / (2.0 * eps);
                let an = grads[which].data()[i];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{which}/{i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::scalar(0.0));
        assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
    }
}
