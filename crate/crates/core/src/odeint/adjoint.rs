//! Adjoint sensitivities by backward integration of the augmented state
//! `[h, a, ∇θ, s]`, where `a = dL/dh(t)` and `s` accumulates `∫ a·∂f/∂t`.

use crate::error::{Error, Result};
use crate::numkit::{Graph, Matrix, Mode, ParamId, ParamStore};

use super::solver::{integrate_flat, SolveStats};
use super::{context_for, OdeFunc, SolverConfig, Trajectory};

/// Result of a backward sweep over a trajectory.
#[derive(Clone, Debug)]
pub struct AdjointState {
    /// Total `dL/dh(t_0)`.
    pub a_h: Matrix,
    /// `dL/dθ` for every trainable tensor of the store.
    pub grad_params: Vec<(ParamId, Matrix)>,
    /// `dL/dt_i` for `i = 1..m`.
    pub grad_times: Vec<f64>,
    pub stats: SolveStats,
}

/// One vector-Jacobian evaluation: returns `(f, a·∂f/∂h, a·∂f/∂θ, a·∂f/∂t)`.
fn vjp<F: OdeFunc + ?Sized>(
    f: &F,
    store: &ParamStore,
    ids: &[ParamId],
    mode: Mode,
    h: Matrix,
    t: f64,
    a: Matrix,
) -> Result<(Matrix, Matrix, Vec<Matrix>, f64)> {
    let mut g = Graph::new();
    let binding = store.bind(&mut g, true);
    let hv = g.leaf(h);
    let tv = g.leaf(Matrix::scalar(t));
    let mut ctx = context_for(mode);
    let out = f.eval(&mut g, &binding, hv, tv, &mut ctx)?;
    let av = g.constant(a);
    let prod = g.mul(out, av)?;
    let loss = g.sum_all(prod)?;
    let mut wrt = vec![hv, tv];
    wrt.extend(ids.iter().map(|&id| binding.var(id)));
    let mut grads = g.backward(loss, &wrt)?.into_iter();
    let gh = grads.next().expect("h");
    let gt = grads.next().expect("t").item();
    Ok((g.value(out).clone(), gh, grads.collect(), gt))
}

/// Evaluates `f(h, t)` without recording gradients.
fn eval_field<F: OdeFunc + ?Sized>(f: &F, store: &ParamStore, mode: Mode, h: &Matrix, t: f64) -> Result<Matrix> {
    let mut g = Graph::new();
    let binding = store.bind(&mut g, false);
    let hv = g.constant(h.clone());
    let tv = g.scalar(t);
    let mut ctx = context_for(mode);
    let out = f.eval(&mut g, &binding, hv, tv, &mut ctx)?;
    Ok(g.value(out).clone())
}

/// Backward sweep over `traj` given the direct loss gradients at every
/// checkpoint (`direct[i] = ∂L/∂h(t_i)` through its own use only, for
/// `i = 0..=m`).
///
/// Time gradients use `∇t_m = a(t_m)·f(h(t_m), t_m)` and, for interior
/// points, the identity `d/dt (a·f) = a·∂f/∂t` inside each segment, so only
/// the adjoint at the last checkpoint has to be retained. The adjoint jumps
/// by `direct[i]` at every checkpoint.
pub fn adjoint<F: OdeFunc + ?Sized>(
    f: &F,
    store: &ParamStore,
    mode: Mode,
    traj: &Trajectory,
    direct: &[Matrix],
    cfg: &SolverConfig,
) -> Result<AdjointState> {
    let m = traj.times.len().saturating_sub(1);
    if traj.states.len() != m + 1 || direct.len() != m + 1 || m == 0 {
        return Err(Error::Shape(format!(
            "{} times, {} states and {} adjoint seeds",
            traj.times.len(),
            traj.states.len(),
            direct.len()
        )));
    }
    let (rows, cols) = traj.states[0].shape();
    for d in direct.iter().chain(&traj.states) {
        if d.shape() != (rows, cols) {
            return Err(Error::Shape(format!("adjoint seed {:?} for state {:?}", d.shape(), (rows, cols))));
        }
    }
    let ids = store.trainable_ids();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.value(id).len()).collect();
    let n_h = rows * cols;
    let n_p: usize = sizes.iter().sum();

    let f_at = |i: usize| eval_field(f, store, mode, &traj.states[i], traj.times[i]);
    let dot = |a: &Matrix, b: &Matrix| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();

    let mut grad_times = vec![0.0; m];
    let mut a = Matrix::zeros(rows, cols);
    let mut theta = vec![0.0; n_p];
    let mut s_total = 0.0;
    let mut stats = SolveStats::default();

    for i in (1..=m).rev() {
        // Entering checkpoint i from the right.
        let f_i = f_at(i)?;
        let later: f64 = grad_times[i..].iter().sum();
        let mut a_left = a.clone();
        a_left.axpy(1.0, &direct[i]);
        // q(t_i^+) = Σ_{j>i} ∇t_j - S_i, and ∇t_i = a(t_i^-)·f_i - q(t_i^+).
        grad_times[i - 1] = dot(&a_left, &f_i) - later + s_total;
        a = a_left;

        let mut y = Vec::with_capacity(2 * n_h + n_p + 1);
        y.extend_from_slice(traj.states[i].data());
        y.extend_from_slice(a.data());
        y.extend_from_slice(&theta);
        y.push(s_total);
        let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
            let h = Matrix::from_vec(rows, cols, y[..n_h].to_vec())?;
            let av = Matrix::from_vec(rows, cols, y[n_h..2 * n_h].to_vec())?;
            let (fv, gh, gp, gt) = vjp(f, store, &ids, mode, h, t, av)?;
            let mut out = Vec::with_capacity(y.len());
            out.extend_from_slice(fv.data());
            out.extend(gh.data().iter().map(|v| -v));
            for g in &gp {
                out.extend(g.data().iter().map(|v| -v));
            }
            out.push(-gt);
            Ok(out)
        };
        let (y, st) = integrate_flat(rhs, y, traj.times[i], traj.times[i - 1], cfg)?;
        stats.accepted += st.accepted;
        stats.rejected += st.rejected;
        stats.rhs_evals += st.rhs_evals;
        a = Matrix::from_vec(rows, cols, y[n_h..2 * n_h].to_vec())?;
        theta.copy_from_slice(&y[2 * n_h..2 * n_h + n_p]);
        s_total = y[2 * n_h + n_p];
    }
    a.axpy(1.0, &direct[0]);

    let mut grad_params = Vec::with_capacity(ids.len());
    let mut offset = 0;
    for (&id, &len) in ids.iter().zip(&sizes) {
        let (r, c) = store.value(id).shape();
        grad_params.push((id, Matrix::from_vec(r, c, theta[offset..offset + len].to_vec())?));
        offset += len;
    }
    Ok(AdjointState { a_h: a, grad_params, grad_times, stats })
}

/// Single-segment adjoint: gradients of a loss on `h(t1)` with respect to
/// the parameters and to `h(t0)`. `h1` is the forward solution at `t1`;
/// the state is reconstructed backward from it.
#[allow(clippy::too_many_arguments)]
pub fn adjoint_grads<F: OdeFunc + ?Sized>(
    f: &F,
    store: &ParamStore,
    mode: Mode,
    h1: &Matrix,
    grad_h1: &Matrix,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<AdjointState> {
    let (r, c) = h1.shape();
    let traj = Trajectory { times: vec![t0, t1], states: vec![Matrix::zeros(r, c), h1.clone()] };
    adjoint(f, store, mode, &traj, &[Matrix::zeros(r, c), grad_h1.clone()], cfg)
}

/// Time-point gradients only; see [`adjoint`].
pub fn time_grads<F: OdeFunc + ?Sized>(
    f: &F,
    store: &ParamStore,
    mode: Mode,
    traj: &Trajectory,
    direct: &[Matrix],
    cfg: &SolverConfig,
) -> Result<Vec<f64>> {
    Ok(adjoint(f, store, mode, traj, direct, cfg)?.grad_times)
}

/// `∇t_i = direct_i·f(h(t_i), t_i)`: the exact gradient when `direct_i` is
/// the loss gradient through the checkpoint's own use, since the effects of
/// moving a segment boundary cancel for an exact flow.
pub fn checkpoint_time_grads(direct: &[Matrix], fields: &[Matrix]) -> Result<Vec<f64>> {
    if direct.len() != fields.len() {
        return Err(Error::Shape(format!("{} seeds for {} field values", direct.len(), fields.len())));
    }
    direct
        .iter()
        .zip(fields)
        .map(|(d, f)| {
            if d.shape() != f.shape() {
                return Err(Error::Shape(format!("seed {:?} vs field {:?}", d.shape(), f.shape())));
            }
            Ok(d.data().iter().zip(f.data()).map(|(x, y)| x * y).sum())
        })
        .collect()
}
