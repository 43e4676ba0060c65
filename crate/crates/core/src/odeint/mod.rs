//! ODE integration over graph-recorded states and flat vectors, checkpointed
//! trajectories, adjoint sensitivities and time-point gradients.

mod adjoint;
mod solver;
mod times;

pub use adjoint::{adjoint, adjoint_grads, checkpoint_time_grads, time_grads, AdjointState};
pub use solver::{integrate, integrate_flat, rk4_steps, FlatSystem, OdeSystem, SolveStats};
pub use times::TimePoints;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Binding, ForwardCtx, Graph, Matrix, Mode, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dopri5,
    Rk4,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// RK4 steps per unit of integration time.
    pub fixed_steps: usize,
    /// Initial DOPRI step; chosen automatically when absent.
    pub first_step: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { method: Method::Dopri5, rtol: 1e-3, atol: 1e-4, max_steps: 1000, fixed_steps: 10, first_step: None }
    }
}

impl SolverConfig {
    /// Fixed-step RK4 used for discretize-then-optimize training.
    pub fn training() -> Self {
        Self { method: Method::Rk4, ..Self::default() }
    }

    pub fn testing() -> Self {
        Self { rtol: 1e-5, atol: 1e-7, ..Self::default() }
    }

    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerances must be positive: rtol={} atol={}", self.rtol, self.atol)));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        if self.method == Method::Rk4 && self.fixed_steps == 0 {
            return Err(Error::InvalidArgument("fixed_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Right-hand side `dh/dt = f(h, t)` built from recorded primitives.
///
/// `t` is a `1 x 1` node; `h` is a batch of states, one per row.
pub trait OdeFunc {
    fn dim(&self) -> usize;

    fn eval(&self, g: &mut Graph, params: &Binding, h: Var, t: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var>;
}

/// Adapter turning a closure into an [`OdeFunc`].
pub struct FnOde<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> OdeFunc for FnOde<F>
where
    F: Fn(&mut Graph, &Binding, Var, Var) -> Result<Var>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, g: &mut Graph, params: &Binding, h: Var, t: Var, _ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        (self.f)(g, params, h, t)
    }
}

/// Checkpointed solution `h(t_0), ..., h(t_m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Matrix>,
}

/// An ODE whose states live on a graph.
///
/// With `compact` set, every accepted step is copied into a fresh constant
/// and the tape is cut back, so memory stays bounded when no gradient is
/// needed.
pub struct GraphSystem<'a, 'c, F: ?Sized> {
    pub graph: &'a mut Graph,
    pub binding: &'a Binding,
    pub f: &'a F,
    pub ctx: &'a mut ForwardCtx<'c>,
    compact_base: Option<usize>,
}

impl<'a, 'c, F: OdeFunc + ?Sized> GraphSystem<'a, 'c, F> {
    pub fn new(graph: &'a mut Graph, binding: &'a Binding, f: &'a F, ctx: &'a mut ForwardCtx<'c>) -> Self {
        Self { graph, binding, f, ctx, compact_base: None }
    }

    pub fn compact(mut self) -> Self {
        self.compact_base = Some(self.graph.len());
        self
    }
}

impl<F: OdeFunc + ?Sized> OdeSystem for GraphSystem<'_, '_, F> {
    type State = Var;

    fn rhs(&mut self, t: f64, y: &Var) -> Result<Var> {
        let tv = self.graph.scalar(t);
        let out = self.f.eval(self.graph, self.binding, *y, tv, self.ctx)?;
        if self.graph.value(out).shape() != self.graph.value(*y).shape() {
            return Err(Error::Shape(format!(
                "vector field output {:?} for state {:?}",
                self.graph.value(out).shape(),
                self.graph.value(*y).shape()
            )));
        }
        Ok(out)
    }

    fn combine(&mut self, base: &Var, terms: &[(f64, &Var)]) -> Result<Var> {
        let mut all = Vec::with_capacity(terms.len() + 1);
        all.push((*base, 1.0));
        all.extend(terms.iter().filter(|(k, _)| *k != 0.0).map(|(k, v)| (**v, *k)));
        self.graph.lincomb(&all)
    }

    fn values<'s>(&'s self, y: &'s Var) -> &'s [f64] {
        self.graph.value(*y).data()
    }

    fn mark(&self) -> usize {
        self.graph.len()
    }

    fn rollback(&mut self, mark: usize) {
        self.graph.truncate(mark);
    }

    fn accepted(&mut self, y: Var, fsal: Option<Var>) -> (Var, Option<Var>) {
        let Some(base) = self.compact_base else { return (y, fsal) };
        let yv = self.graph.value(y).clone();
        let fv = fsal.map(|k| self.graph.value(k).clone());
        self.graph.truncate(base);
        let y = self.graph.constant(yv);
        (y, fv.map(|v| self.graph.constant(v)))
    }
}

/// Solves on the tape so the result is differentiable by backpropagation.
#[allow(clippy::too_many_arguments)]
pub fn solve_var<F: OdeFunc + ?Sized>(
    g: &mut Graph,
    binding: &Binding,
    f: &F,
    ctx: &mut ForwardCtx<'_>,
    h0: Var,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Var> {
    let mut sys = GraphSystem::new(g, binding, f, ctx);
    Ok(integrate(&mut sys, h0, t0, t1, cfg)?.0)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("no checkpoint times".into()));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!("checkpoint times must be strictly increasing: {times:?}")));
    }
    Ok(())
}

/// Piecewise solve through `times`; the first returned state is `h0`.
#[allow(clippy::too_many_arguments)]
pub fn solve_checkpoints_var<F: OdeFunc + ?Sized>(
    g: &mut Graph,
    binding: &Binding,
    f: &F,
    ctx: &mut ForwardCtx<'_>,
    h0: Var,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Var>> {
    check_times(times)?;
    let mut states = vec![h0];
    for w in times.windows(2) {
        let prev = *states.last().expect("non-empty");
        states.push(solve_var(g, binding, f, ctx, prev, w[0], w[1], cfg)?);
    }
    Ok(states)
}

fn context_for(mode: Mode) -> ForwardCtx<'static> {
    match mode {
        Mode::Eval => ForwardCtx::eval(),
        Mode::Train => ForwardCtx::train_no_dropout().without_stat_updates(),
    }
}

/// Value-level solve with no gradient tracking, in either direction.
pub fn solve<F: OdeFunc + ?Sized>(
    f: &F,
    store: &ParamStore,
    mode: Mode,
    h0: &Matrix,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Matrix> {
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(Error::InvalidArgument(format!("integration bounds must be finite: [{t0}, {t1}]")));
    }
    let mut g = Graph::new();
    let binding = store.bind(&mut g, false);
    let mut ctx = context_for(mode);
    let y0 = g.constant(h0.clone());
    let mut sys = GraphSystem::new(&mut g, &binding, f, &mut ctx).compact();
    let (y, _) = integrate(&mut sys, y0, t0, t1, cfg)?;
    Ok(g.value(y).clone())
}

/// Value-level checkpointed solve with no gradient tracking.
pub fn solve_checkpoints<F: OdeFunc + ?Sized>(
    f: &F,
    store: &ParamStore,
    mode: Mode,
    h0: &Matrix,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Trajectory> {
    check_times(times)?;
    let mut g = Graph::new();
    let binding = store.bind(&mut g, false);
    let mut ctx = context_for(mode);
    let mut states = vec![h0.clone()];
    for w in times.windows(2) {
        let y0 = g.constant(states.last().expect("non-empty").clone());
        let mut sys = GraphSystem::new(&mut g, &binding, f, &mut ctx).compact();
        let (y, _) = integrate(&mut sys, y0, w[0], w[1], cfg)?;
        states.push(g.value(y).clone());
    }
    Ok(Trajectory { times: times.to_vec(), states })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(a: Matrix) -> FnOde<impl Fn(&mut Graph, &Binding, Var, Var) -> Result<Var>> {
        let d = a.rows();
        FnOde {
            dim: d,
            f: move |g: &mut Graph, _: &Binding, h: Var, _t: Var| {
                let a = g.constant(a.clone());
                g.matmul_t(h, false, a, true)
            },
        }
    }

    #[test]
    fn zero_field_returns_initial_state_exactly() {
        let f = FnOde { dim: 2, f: |g: &mut Graph, _: &Binding, h: Var, _t: Var| g.scale(h, 0.0) };
        let h0 = Matrix::row_vector(&[0.3, -7.0]);
        let out = solve(&f, &ParamStore::new(), Mode::Eval, &h0, 0.0, 2.5, &SolverConfig::testing()).unwrap();
        assert_eq!(out, h0);
    }

    #[test]
    fn linear_drift_checkpoints() {
        let f = FnOde {
            dim: 1,
            f: |g: &mut Graph, _: &Binding, h: Var, _t: Var| {
                let z = g.scale(h, 0.0)?;
                g.add_scalar(z, 1.0)
            },
        };
        let traj = solve_checkpoints(&f, &ParamStore::new(), Mode::Eval, &Matrix::scalar(0.0), &[0.0, 0.5, 1.0], &SolverConfig::testing())
            .unwrap();
        let got: Vec<f64> = traj.states.iter().map(|s| s.item()).collect();
        for (g, e) in got.iter().zip([0.0, 0.5, 1.0]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn non_monotone_times_are_rejected() {
        let f = linear(Matrix::identity(1));
        let r = solve_checkpoints(&f, &ParamStore::new(), Mode::Eval, &Matrix::scalar(1.0), &[0.0, 0.5, 0.5], &SolverConfig::testing());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn recorded_solve_is_differentiable() {
        // dh/dt = -k h, h(1) = h0 exp(-k); d/dh0 = exp(-k)
        let f = linear(Matrix::scalar(-0.7));
        let mut g = Graph::new();
        let store = ParamStore::new();
        let b = store.bind(&mut g, true);
        let h0 = g.leaf(Matrix::scalar(2.0));
        let mut ctx = ForwardCtx::eval();
        let out = solve_var(&mut g, &b, &f, &mut ctx, h0, 0.0, 1.0, &SolverConfig::training()).unwrap();
        let grads = g.backward(out, &[h0]).unwrap();
        assert!((grads[0].item() - (-0.7f64).exp()).abs() < 1e-5);
    }

    #[test]
    fn compact_solve_keeps_the_tape_short() {
        let f = linear(Matrix::scalar(1.0));
        let mut g = Graph::new();
        let store = ParamStore::new();
        let b = store.bind(&mut g, false);
        let y0 = g.constant(Matrix::scalar(1.0));
        let mut ctx = ForwardCtx::eval();
        let before = g.len();
        let mut sys = GraphSystem::new(&mut g, &b, &f, &mut ctx).compact();
        let (y, stats) = integrate(&mut sys, y0, 0.0, 3.0, &SolverConfig::testing()).unwrap();
        assert!(stats.accepted > 5);
        assert!(g.len() <= before + 3);
        assert!((g.value(y).item() - 3.0f64.exp()).abs() < 1e-3);
    }
}
