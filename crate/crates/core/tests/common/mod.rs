//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use octgan::numkit::{Binding, Graph, Matrix, ParamId, ParamStore, RngStream, Var};
use octgan::Result;

/// Central difference of `f` with respect to every entry of `x`.
pub fn fd_grad(x: &Matrix, eps: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let v = x.data()[k];
        probe.data_mut()[k] = v + eps;
        let up = f(&probe);
        probe.data_mut()[k] = v - eps;
        let down = f(&probe);
        probe.data_mut()[k] = v;
        out.data_mut()[k] = (up - down) / (2.0 * eps);
    }
    out
}

/// Central difference with respect to every trainable tensor of `store`.
pub fn fd_param_grads(store: &mut ParamStore, eps: f64, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<Matrix> {
    let ids = store.trainable_ids();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (r, c) = store.value(id).shape();
        let mut g = Matrix::zeros(r, c);
        for k in 0..r * c {
            let v = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = v + eps;
            let up = f(store);
            store.value_mut(id).data_mut()[k] = v - eps;
            let down = f(store);
            store.value_mut(id).data_mut()[k] = v;
            g.data_mut()[k] = (up - down) / (2.0 * eps);
        }
        out.push(g);
    }
    out
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, floor)` over a list of tensors.
pub fn rel_err(a: &[Matrix], b: &[Matrix], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    let mut out = Matrix::zeros(n, b.cols());
    for i in 0..n {
        for k in 0..a.cols() {
            let aik = a.get(i, k);
            for j in 0..b.cols() {
                out.set(i, j, out.get(i, j) + aik * b.get(k, j));
            }
        }
    }
    out
}

/// Matrix exponential by scaling and squaring of a 30-term Taylor series.
pub fn expm(a: &Matrix) -> Matrix {
    let norm = a.data().iter().map(|v| v.abs()).sum::<f64>();
    let mut s = 0;
    while norm / f64::from(1u32 << s) > 0.5 {
        s += 1;
    }
    let scaled = a.map(|v| v / f64::from(1u32 << s));
    let mut term = Matrix::identity(a.rows());
    let mut sum = term.clone();
    for k in 1..30 {
        term = matmul(&term, &scaled).map(|v| v / k as f64);
        sum.axpy(1.0, &term);
    }
    for _ in 0..s {
        sum = matmul(&sum, &sum);
    }
    sum
}

/// `h0 · expm(t A)ᵀ` for row states evolving as `dh/dt = h Aᵀ`.
pub fn linear_flow(a: &Matrix, h0: &Matrix, t: f64) -> Matrix {
    let e = expm(&a.map(|v| v * t));
    matmul(h0, &e.transpose())
}

#[derive(Clone, Copy, Debug)]
pub enum Act {
    Tanh,
    Leaky,
    Softmax,
    Square,
    Smooth,
}

/// A random stack of affine layers and activations ending in a scalar.
pub struct RandomNet {
    pub layers: Vec<(ParamId, ParamId, Act)>,
    pub store: ParamStore,
    pub input: usize,
}

impl RandomNet {
    pub fn new(rng: &mut RngStream, input: usize) -> Self {
        let mut store = ParamStore::new();
        let depth = 1 + rng.below(3);
        let mut width = input;
        let mut layers = Vec::new();
        for i in 0..depth {
            let out = 2 + rng.below(4);
            let w = store.add(format!("w{i}"), rng.normal_matrix(width, out).map(|v| v / (width as f64).sqrt()));
            let b = store.add(format!("b{i}"), rng.normal_matrix(1, out).map(|v| 0.1 * v));
            let act = [Act::Tanh, Act::Leaky, Act::Softmax, Act::Square, Act::Smooth][rng.below(5)];
            layers.push((w, b, act));
            width = out;
        }
        Self { layers, store, input }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, bias, act) in &self.layers {
            let a = g.affine(h, b.var(w), Some(b.var(bias)))?;
            h = match act {
                Act::Tanh => g.tanh(a)?,
                Act::Leaky => g.leaky_relu(a, 0.2)?,
                Act::Softmax => g.softmax(a)?,
                Act::Square => g.square(a)?,
                Act::Smooth => {
                    let sq = g.square(a)?;
                    let one = g.add_scalar(sq, 1.0)?;
                    g.sqrt(one)?
                }
            };
        }
        let l = g.log_softmax(h)?;
        let mixed = g.mul(l, h)?;
        g.sum_all(mixed)
    }

    pub fn loss(&self, store: &ParamStore, x: &Matrix) -> f64 {
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &b, xv).unwrap();
        g.value(out).item()
    }

    /// Backpropagated gradients for the parameters and the input.
    pub fn grads(&self, x: &Matrix) -> (Vec<Matrix>, Matrix) {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, true);
        let xv = g.leaf(x.clone());
        let out = self.forward(&mut g, &b, xv).unwrap();
        let mut wrt: Vec<Var> = self.store.trainable_ids().iter().map(|&id| b.var(id)).collect();
        wrt.push(xv);
        let mut gr = g.backward(out, &wrt).unwrap();
        let gx = gr.pop().unwrap();
        (gr, gx)
    }
}

use octgan::model::{gradient_penalty, Discriminator, PenaltyMode};
use octgan::numkit::{ForwardCtx, Mode};
use octgan::odeint::{adjoint_grads, checkpoint_time_grads, solve, FnOde, OdeFunc, SolverConfig};

/// Tight tolerances so solver error stays far below finite-difference noise.
pub fn tight() -> SolverConfig {
    SolverConfig::dopri5(1e-11, 1e-13)
}

/// Worst relative error of backpropagation against central differences for
/// the parameters and the input of one random network.
pub fn graph_gradient_error(seed: u64) -> f64 {
    let mut rng = RngStream::with_stream_id(seed, 100);
    let input = 2 + rng.below(3);
    let mut net = RandomNet::new(&mut rng, input);
    let rows = 1 + rng.below(4);
    let x = rng.normal_matrix(rows, input);
    let (gp, gx) = net.grads(&x);
    let mut store = std::mem::take(&mut net.store);
    let fp = fd_param_grads(&mut store, 1e-6, |s| net.loss(s, &x));
    let fx = fd_grad(&x, 1e-6, |x| net.loss(&store, x));
    rel_err(&gp, &fp, 1e-8).max(rel_err(&[gx], &[fx], 1e-8))
}

/// `tanh([h, t] W + b)` with its parameters.
pub fn tanh_field(store: &mut ParamStore, rng: &mut RngStream, dim: usize) -> impl OdeFunc {
    let w = store.add("w", rng.normal_matrix(dim + 1, dim).map(|v| v / (dim as f64).sqrt()));
    let b = store.add("b", rng.normal_matrix(1, dim).map(|v| 0.3 * v));
    FnOde {
        dim,
        f: move |g: &mut Graph, p: &Binding, h: Var, t: Var| {
            let n = g.value(h).rows();
            let tc = g.broadcast_all(t, n, 1)?;
            let x = g.concat_cols(&[h, tc])?;
            let a = g.affine(x, p.var(w), Some(p.var(b)))?;
            g.tanh(a)
        },
    }
}

/// Worst relative error of the adjoint parameter and initial-state
/// gradients against central differences of a tightly solved loss.
pub fn adjoint_gradient_error(seed: u64) -> f64 {
    let mut rng = RngStream::with_stream_id(seed, 101);
    let dim = 2 + rng.below(3);
    let mut store = ParamStore::new();
    let f = tanh_field(&mut store, &mut rng, dim);
    let rows = 1 + rng.below(3);
    let h0 = rng.normal_matrix(rows, dim);
    let weights = rng.normal_matrix(h0.rows(), dim);
    let cfg = tight();
    let loss = |s: &ParamStore, h: &Matrix| {
        let h1 = solve(&f, s, Mode::Eval, h, 0.0, 1.0, &cfg).unwrap();
        h1.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let h1 = solve(&f, &store, Mode::Eval, &h0, 0.0, 1.0, &cfg).unwrap();
    let adj = adjoint_grads(&f, &store, Mode::Eval, &h1, &weights, 0.0, 1.0, &cfg).unwrap();
    let analytic: Vec<Matrix> = adj.grad_params.iter().map(|(_, g)| g.clone()).collect();
    let fp = fd_param_grads(&mut store, 1e-5, |s| loss(s, &h0));
    let fh = fd_grad(&h0, 1e-5, |h| loss(&store, h));
    rel_err(&analytic, &fp, 1e-8).max(rel_err(&[adj.a_h], &[fh], 1e-8))
}

pub fn small_critic(rng: &mut RngStream, input: usize) -> (Discriminator, ParamStore) {
    let mut store = ParamStore::new();
    let d = Discriminator::new(&mut store, rng, input, 3, 2, 0.5, true);
    (d, store)
}

/// Relative error of the exact gradient-penalty parameter gradient against
/// central differences of the penalty value. The critic normalizes with
/// batch statistics here, so inputs are spread wide to keep them well
/// conditioned, and the step is small enough to stay clear of ReLU kinks.
pub fn penalty_gradient_error(seed: u64) -> f64 {
    let mut rng = RngStream::with_stream_id(seed, 102);
    let input = 2 + rng.below(2);
    let (d, mut store) = small_critic(&mut rng, input);
    let mut x = rng.normal_matrix(8, input);
    x.scale_in_place(10.0);
    let times = [0.0, 0.4, 1.0];
    let cfg = SolverConfig::training();
    store.zero_grads();
    gradient_penalty(&d, &mut store, &x, &times, 10.0, &cfg, PenaltyMode::Exact, true).unwrap();
    let analytic: Vec<Matrix> = store.trainable_ids().iter().map(|&id| store.grad(id).clone()).collect();
    let fd = fd_param_grads(&mut store, 1e-8, |s| {
        let mut s = s.clone();
        gradient_penalty(&d, &mut s, &x, &times, 10.0, &cfg, PenaltyMode::Exact, false).unwrap()
    });
    rel_err(&analytic, &fd, 1e-8)
}

fn critic_score_sum(d: &Discriminator, store: &ParamStore, x: &Matrix, times: &[f64], cfg: &SolverConfig) -> f64 {
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut ctx = ForwardCtx::eval();
    let out = d.forward(&mut g, &b, xv, times, &mut ctx, cfg).unwrap();
    g.value(out.score).sum()
}

/// Relative error of the checkpoint-time gradients `direct_i · f(h(t_i), t_i)`
/// against central differences in `t_i`.
pub fn time_gradient_error(seed: u64) -> f64 {
    let mut rng = RngStream::with_stream_id(seed, 103);
    let input = 2 + rng.below(2);
    let (d, store) = small_critic(&mut rng, input);
    let x = rng.normal_matrix(4, input);
    let t1 = 0.2 + 0.3 * rng.uniform();
    let times = vec![0.0, t1, 1.0];
    let cfg = tight();

    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let mut ctx = ForwardCtx::eval();
    let out = d.forward(&mut g, &b, xv, &times, &mut ctx, &cfg).unwrap();
    let s = g.sum_all(out.score).unwrap();
    let ghx = g.backward(s, &[out.hx]).unwrap().pop().unwrap();
    let hidden = d.hidden;
    let mut direct = Vec::new();
    let mut fields = Vec::new();
    for (i, &t) in times.iter().enumerate().skip(1) {
        direct.push(ghx.slice_cols(i * hidden, hidden));
        let state = g.value(out.states[i]).clone();
        let mut fg = Graph::new();
        let fb = store.bind(&mut fg, false);
        let hv = fg.constant(state);
        let tv = fg.scalar(t);
        let mut fctx = ForwardCtx::eval();
        let fv = d.field.eval(&mut fg, &fb, hv, tv, &mut fctx).unwrap();
        fields.push(fg.value(fv).clone());
    }
    let analytic = checkpoint_time_grads(&direct, &fields).unwrap();
    let eps = 1e-5;
    let fd: Vec<f64> = (1..times.len())
        .map(|i| {
            let mut up = times.clone();
            up[i] += eps;
            let mut down = times.clone();
            down[i] -= eps;
            (critic_score_sum(&d, &store, &x, &up, &cfg) - critic_score_sum(&d, &store, &x, &down, &cfg)) / (2.0 * eps)
        })
        .collect();
    rel_err(&[Matrix::row_vector(&analytic)], &[Matrix::row_vector(&fd)], 1e-8)
}

/// `dh/dt = h Aᵀ` on row states.
pub fn linear_field(a: &Matrix) -> impl OdeFunc {
    let at = a.transpose();
    FnOde {
        dim: a.rows(),
        f: move |g: &mut Graph, _: &Binding, h: Var, _t: Var| {
            let m = g.constant(at.clone());
            g.matmul(h, m)
        },
    }
}

/// Brute-force binary F1: count every cell of the confusion table.
pub fn brute_f1(truth: &[usize], pred: &[usize], positive: usize) -> f64 {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    for i in 0..truth.len() {
        match (truth[i] == positive, pred[i] == positive) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp == 0.0 {
        0.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

/// Mean of per-class F1 over every class seen in either vector.
pub fn brute_macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    let mut classes: Vec<usize> = truth.iter().chain(pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    classes.iter().map(|&c| brute_f1(truth, pred, c)).sum::<f64>() / classes.len() as f64
}

pub fn brute_r2(truth: &[f64], pred: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Silhouette from its definition: `(b - a) / max(a, b)` per point, zero
/// for singleton clusters, `None` with fewer than two clusters.
pub fn brute_silhouette(points: &[Vec<f64>], labels: &[usize]) -> Option<f64> {
    let dist = |i: usize, j: usize| points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let own: Vec<usize> = (0..points.len()).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
        let mut b = f64::INFINITY;
        for &c in &clusters {
            if c == labels[i] {
                continue;
            }
            let other: Vec<usize> = (0..points.len()).filter(|&j| labels[j] == c).collect();
            b = b.min(other.iter().map(|&j| dist(i, j)).sum::<f64>() / other.len() as f64);
        }
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Some(total / points.len() as f64)
}
