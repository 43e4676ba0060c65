//! Layers built from graph primitives, plus the stochastic heads.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::params::init_uniform;
use super::{Binding, Graph, Matrix, ParamId, ParamStore, RngStream, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DROPOUT_RATE: f64 = 0.5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics for normalization, dropout active.
    Train,
    /// Running statistics, dropout is the identity.
    Eval,
}

struct PendingStats {
    mean_id: ParamId,
    var_id: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
    n: usize,
}

/// Per-forward state: mode, dropout randomness and the running-statistics
/// updates collected from train-mode normalization.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    dropout_rng: Option<&'a mut RngStream>,
    pending: Vec<PendingStats>,
    record_stats: bool,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(dropout_rng: &'a mut RngStream) -> Self {
        Self { mode: Mode::Train, dropout_rng: Some(dropout_rng), pending: Vec::new(), record_stats: true }
    }

    /// Train-mode normalization without dropout (for layers that have none).
    pub fn train_no_dropout() -> Self {
        Self { mode: Mode::Train, dropout_rng: None, pending: Vec::new(), record_stats: true }
    }

    pub fn eval() -> Self {
        Self { mode: Mode::Eval, dropout_rng: None, pending: Vec::new(), record_stats: false }
    }

    /// Train-mode statistics without touching the running estimates.
    pub fn without_stat_updates(mut self) -> Self {
        self.record_stats = false;
        self
    }

    /// Folds the collected batch statistics into the running estimates,
    /// in the order they were produced.
    pub fn commit(self, store: &mut ParamStore) {
        for p in self.pending {
            let unbias = if p.n > 1 { p.n as f64 / (p.n as f64 - 1.0) } else { 1.0 };
            let rm = store.value_mut(p.mean_id);
            for (r, m) in rm.data_mut().iter_mut().zip(&p.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let rv = store.value_mut(p.var_id);
            for (r, v) in rv.data_mut().iter_mut().zip(&p.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v * unbias;
            }
        }
    }
}

/// Fully connected layer `x W + b`, weights stored `in x out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, name: &str, input: usize, output: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, input, input, output));
        let bias = store.add(format!("{name}.bias"), init_uniform(rng, input, 1, output));
        Self { weight, bias, input, output }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        g.affine(x, b.var(self.weight), Some(b.var(self.bias)))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.value_mut(self.weight).data_mut().fill(0.0);
        store.value_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Matrix::zeros(1, dim)),
            running_var: store.add_buffer(format!("{name}.running_var"), Matrix::filled(1, dim, 1.0)),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        match ctx.mode {
            Mode::Train => {
                let n = g.value(x).rows();
                let (y, stats) = g.batch_norm(x, b.var(self.gamma), b.var(self.beta), BN_EPS)?;
                if ctx.record_stats {
                    ctx.pending.push(PendingStats {
                        mean_id: self.running_mean,
                        var_id: self.running_var,
                        mean: stats.mean,
                        var: stats.var,
                        n,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                // Row-affine form: gamma / sqrt(rv + eps) and beta - rm * scale.
                let rm = g.value(b.var(self.running_mean)).clone();
                let rv = g.value(b.var(self.running_var)).clone();
                let inv = g.constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()));
                let scale = g.mul(b.var(self.gamma), inv)?;
                let rm = g.constant(rm);
                let rms = g.mul(rm, scale)?;
                let shift = g.sub(b.var(self.beta), rms)?;
                g.row_affine(x, Some(scale), Some(shift))
            }
        }
    }
}

/// Inverted dropout: identity in eval mode, otherwise zeroes entries with
/// probability `rate` and rescales survivors by `1 / (1 - rate)`.
pub fn dropout(g: &mut Graph, x: Var, rate: f64, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let Some(rng) = ctx.dropout_rng.as_deref_mut() else { return Ok(x) };
    let (r, c) = g.value(x).shape();
    let keep = 1.0 - rate;
    let data = (0..r * c).map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 }).collect();
    g.mask_mul(x, Rc::new(Matrix::from_vec(r, c, data)?))
}

/// Row-wise `p / ‖p‖₂`. Rows with zero norm are returned unchanged and the
/// second value reports whether that fallback fired.
pub fn l2_normalize(g: &mut Graph, p: Var) -> Result<(Var, bool)> {
    let sq = g.square(p)?;
    let s = g.sum_cols(sq)?;
    let zero_rows: Vec<f64> = g.value(s).data().iter().map(|&v| if v == 0.0 { 1.0 } else { 0.0 }).collect();
    let flagged = zero_rows.iter().any(|&z| z != 0.0);
    let s = if flagged {
        let n = zero_rows.len();
        let fix = g.constant(Matrix::from_vec(n, 1, zero_rows)?);
        g.add(s, fix)?
    } else {
        s
    };
    let norm = g.sqrt(s)?;
    let inv = g.recip(norm)?;
    Ok((g.mul_col(p, inv)?, flagged))
}

/// Relaxed categorical sample `softmax((logits + Gumbel) / temperature)`.
///
/// With `hard` the forward value is the argmax one-hot of the relaxed sample
/// while gradients flow through the relaxed sample (straight-through).
/// Returns `(output, soft)`.
pub fn gumbel_softmax(
    g: &mut Graph,
    logits: Var,
    temperature: f64,
    rng: &mut RngStream,
    hard: bool,
) -> Result<(Var, Var)> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("gumbel temperature must be positive, got {temperature}")));
    }
    let (r, c) = g.value(logits).shape();
    let noise = g.constant(rng.gumbel_matrix(r, c));
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / temperature)?;
    let soft = g.softmax(scaled)?;
    if !hard {
        return Ok((soft, soft));
    }
    let hard_value = one_hot_argmax(g.value(soft));
    Ok((g.straight_through(soft, hard_value)?, soft))
}

/// Argmax one-hot of each row.
pub fn one_hot_argmax(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        if let Some(k) = argmax(m.row(r)) {
            out.set(r, k, 1.0);
        }
    }
    out
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in xs.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Primitive kinds exposed for value-level evaluation.
#[derive(Clone, Debug)]
pub enum Primitive {
    /// inputs: x, W (`in x out`), b (`1 x out`)
    Affine,
    Relu,
    LeakyRelu,
    Tanh,
    /// inputs: x, gamma, beta, running_mean, running_var
    BatchNorm,
    Dropout(f64),
    Softmax,
    Concat,
}

/// Evaluates one primitive on plain matrices.
pub fn forward_primitive(
    kind: Primitive,
    inputs: &[&Matrix],
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<Matrix> {
    for (i, m) in inputs.iter().enumerate() {
        m.ensure_finite(&format!("input {i}"))?;
    }
    let need = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{kind:?} takes {n} inputs, got {}", inputs.len())))
        }
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.constant((*m).clone())).collect();
    let out = match kind {
        Primitive::Affine => {
            need(3)?;
            g.affine(vars[0], vars[1], Some(vars[2]))?
        }
        Primitive::Relu => {
            need(1)?;
            g.relu(vars[0])?
        }
        Primitive::LeakyRelu => {
            need(1)?;
            g.leaky_relu(vars[0], LEAKY_SLOPE)?
        }
        Primitive::Tanh => {
            need(1)?;
            g.tanh(vars[0])?
        }
        Primitive::Softmax => {
            need(1)?;
            g.softmax(vars[0])?
        }
        Primitive::Concat => g.concat_cols(&vars)?,
        Primitive::Dropout(rate) => {
            need(1)?;
            let mut ctx = match (mode, rng) {
                (Mode::Train, Some(r)) => ForwardCtx::train(r),
                _ => ForwardCtx::eval(),
            };
            dropout(&mut g, vars[0], rate, &mut ctx)?
        }
        Primitive::BatchNorm => {
            need(5)?;
            let mut store = ParamStore::new();
            let d = inputs[0].cols();
            let bn = BatchNorm1d::new(&mut store, "bn", d);
            store.set(bn.gamma, inputs[1].clone())?;
            store.set(bn.beta, inputs[2].clone())?;
            store.set(bn.running_mean, inputs[3].clone())?;
            store.set(bn.running_var, inputs[4].clone())?;
            let b = store.bind(&mut g, false);
            let mut ctx = match mode {
                Mode::Train => ForwardCtx::train_no_dropout(),
                Mode::Eval => ForwardCtx::eval(),
            };
            bn.forward(&mut g, &b, vars[0], &mut ctx)?
        }
    };
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;

    #[test]
    fn affine_examples() {
        let x = Matrix::row_vector(&[3.0, -1.0]);
        let id = Matrix::identity(2);
        let zero = Matrix::zeros(1, 2);
        let y = forward_primitive(Primitive::Affine, &[&x, &id, &zero], Mode::Eval, None).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
        // Row-vector convention: y = x W with W stored in x out, so the
        // column-vector example W = [[1,2],[3,4]] is its transpose here.
        let w = Matrix::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]);
        let ones = Matrix::row_vector(&[1.0, 1.0]);
        let y = forward_primitive(Primitive::Affine, &[&ones, &w, &zero], Mode::Eval, None).unwrap();
        assert_eq!(y.data(), &[3.0, 7.0]);
    }

    #[test]
    fn leaky_relu_example() {
        let x = Matrix::row_vector(&[-1.0, 2.0]);
        let y = forward_primitive(Primitive::LeakyRelu, &[&x], Mode::Eval, None).unwrap();
        assert_eq!(y.data(), &[-0.2, 2.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_seeded() {
        let mut rng = RngStream::new(3, Stream::Dropout);
        let x = rng.normal_matrix(4, 6);
        let y = forward_primitive(Primitive::Dropout(0.5), &[&x], Mode::Eval, None).unwrap();
        assert_eq!(y, x);
        let mut r1 = RngStream::new(9, Stream::Dropout);
        let mut r2 = RngStream::new(9, Stream::Dropout);
        let a = forward_primitive(Primitive::Dropout(0.5), &[&x], Mode::Train, Some(&mut r1)).unwrap();
        let b = forward_primitive(Primitive::Dropout(0.5), &[&x], Mode::Train, Some(&mut r2)).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().zip(x.data()).all(|(&o, &i)| o == 0.0 || o == 2.0 * i));
    }

    #[test]
    fn batchnorm_eval_matches_train_when_running_stats_are_batch_stats() {
        let mut rng = RngStream::new(5, Stream::Test);
        let x = rng.normal_matrix(16, 5).map(|v| 3.0 * v + 1.0);
        let gamma = rng.uniform_matrix(1, 5, 0.5, 1.5);
        let beta = rng.normal_matrix(1, 5);
        let n = x.rows() as f64;
        let mean = x.sum_rows().map(|s| s / n);
        let mut var = Matrix::zeros(1, 5);
        for r in 0..x.rows() {
            for c in 0..5 {
                let d = x.get(r, c) - mean.get(0, c);
                var.set(0, c, var.get(0, c) + d * d / n);
            }
        }
        let train =
            forward_primitive(Primitive::BatchNorm, &[&x, &gamma, &beta, &mean, &var], Mode::Train, None).unwrap();
        let eval =
            forward_primitive(Primitive::BatchNorm, &[&x, &gamma, &beta, &mean, &var], Mode::Eval, None).unwrap();
        assert!(train.max_abs_diff(&eval) < 1e-10);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let p = g.constant(Matrix::from_rows(&[vec![3.0, 4.0], vec![0.6, 0.8], vec![0.0, 0.0]]));
        let (n, flagged) = l2_normalize(&mut g, p).unwrap();
        let v = g.value(n);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
        assert!((v.get(1, 0) - 0.6).abs() < 1e-15 && (v.get(1, 1) - 0.8).abs() < 1e-15);
        assert_eq!(v.row(2), &[0.0, 0.0]);
        assert!(flagged);
    }

    #[test]
    fn gumbel_rejects_non_positive_temperature() {
        let mut g = Graph::new();
        let l = g.constant(Matrix::zeros(1, 3));
        let mut rng = RngStream::new(0, Stream::Gumbel);
        assert!(gumbel_softmax(&mut g, l, 0.0, &mut rng, false).is_err());
        assert!(gumbel_softmax(&mut g, l, -1.0, &mut rng, false).is_err());
    }

    #[test]
    fn gumbel_rows_sum_to_one() {
        let mut g = Graph::new();
        let l = g.constant(Matrix::zeros(50, 3));
        let mut rng = RngStream::new(0, Stream::Gumbel);
        let (s, _) = gumbel_softmax(&mut g, l, 0.7, &mut rng, false).unwrap();
        for r in 0..50 {
            let row = g.value(s).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn straight_through_is_hard_forward_soft_backward() {
        let mut g = Graph::new();
        let l = g.leaf(Matrix::row_vector(&[0.3, -0.2, 1.0]));
        let mut rng = RngStream::new(4, Stream::Gumbel);
        let (hard, soft) = gumbel_softmax(&mut g, l, 0.5, &mut rng, true).unwrap();
        let hv = g.value(hard);
        assert_eq!(hv.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(hv.data().iter().filter(|&&v| v == 0.0).count(), 2);
        let w = g.constant(Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let a = g.mul(hard, w).unwrap();
        let la = g.sum_all(a).unwrap();
        let b = g.mul(soft, w).unwrap();
        let lb = g.sum_all(b).unwrap();
        let ga = g.backward(la, &[l]).unwrap();
        let gb = g.backward(lb, &[l]).unwrap();
        assert_eq!(ga[0], gb[0]);
    }
}
