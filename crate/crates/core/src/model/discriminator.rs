//! Trajectory-based ODE discriminator (a Wasserstein critic).

use crate::error::Result;
use crate::numkit::layers::{dropout, BatchNorm1d, Linear, LEAKY_SLOPE};
use crate::numkit::{Binding, ForwardCtx, Graph, ParamStore, RngStream, Var};
use crate::odeint::{solve_checkpoints_var, OdeFunc, SolverConfig};

/// `f(h, t) = ReLU(BN(FC7(ReLU(BN(FC6(ReLU(BN(h)) ⊕ t))))))`.
#[derive(Clone, Debug)]
pub struct DiscriminatorField {
    pub bn_in: BatchNorm1d,
    pub fc6: Linear,
    pub bn6: BatchNorm1d,
    pub fc7: Linear,
    pub bn7: BatchNorm1d,
    pub dim: usize,
}

impl DiscriminatorField {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, dim: usize) -> Self {
        Self {
            bn_in: BatchNorm1d::new(store, "d.ode.bn_in", dim),
            fc6: Linear::new(store, rng, "d.ode.fc6", dim + 1, dim),
            bn6: BatchNorm1d::new(store, "d.ode.bn6", dim),
            fc7: Linear::new(store, rng, "d.ode.fc7", dim, dim),
            bn7: BatchNorm1d::new(store, "d.ode.bn7", dim),
            dim,
        }
    }
}

impl OdeFunc for DiscriminatorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, g: &mut Graph, b: &Binding, h: Var, t: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let n = g.value(h).rows();
        let x = self.bn_in.forward(g, b, h, ctx)?;
        let x = g.relu(x)?;
        let tcol = g.broadcast_all(t, n, 1)?;
        let x = g.concat_cols(&[x, tcol])?;
        let x = self.fc6.forward(g, b, x)?;
        let x = self.bn6.forward(g, b, x, ctx)?;
        let x = g.relu(x)?;
        let x = self.fc7.forward(g, b, x)?;
        let x = self.bn7.forward(g, b, x, ctx)?;
        g.relu(x)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub hidden: usize,
    pub dropout: f64,
    /// `false` scores from `h(0)` alone.
    pub use_trajectory: bool,
    pub fc1: Linear,
    pub fc2: Linear,
    pub field: DiscriminatorField,
    pub fc3: Linear,
    pub fc4: Linear,
    pub fc5: Linear,
}

pub struct DiscriminatorOutput {
    /// `n x 1` critic scores.
    pub score: Var,
    /// Concatenated trajectory `h(0) ⊕ h(t_1) ⊕ ... ⊕ h(t_m)`.
    pub hx: Var,
    /// `h(0), h(t_1), ..., h(t_m)`; only `h(0)` without a trajectory.
    pub states: Vec<Var>,
}

impl Discriminator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        input: usize,
        hidden: usize,
        m: usize,
        dropout: f64,
        use_trajectory: bool,
    ) -> Self {
        let fc1 = Linear::new(store, rng, "d.fc1", input, hidden);
        let fc2 = Linear::new(store, rng, "d.fc2", hidden, hidden);
        let field = DiscriminatorField::new(store, rng, hidden);
        let hx = if use_trajectory { hidden * (m + 1) } else { hidden };
        let fc3 = Linear::new(store, rng, "d.fc3", hx, 2 * hx);
        let fc4 = Linear::new(store, rng, "d.fc4", 2 * hx, hx);
        let fc5 = Linear::new(store, rng, "d.fc5", hx, 1);
        Self { hidden, dropout, use_trajectory, fc1, fc2, field, fc3, fc4, fc5 }
    }

    pub fn trunk(&self, g: &mut Graph, b: &Binding, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let a = self.fc1.forward(g, b, x)?;
        let a = g.leaky_relu(a, LEAKY_SLOPE)?;
        let a = dropout(g, a, self.dropout, ctx)?;
        let a = self.fc2.forward(g, b, a)?;
        let a = g.leaky_relu(a, LEAKY_SLOPE)?;
        dropout(g, a, self.dropout, ctx)
    }

    pub fn head(&self, g: &mut Graph, b: &Binding, hx: Var) -> Result<Var> {
        let a = self.fc3.forward(g, b, hx)?;
        let a = g.leaky_relu(a, LEAKY_SLOPE)?;
        let a = self.fc4.forward(g, b, a)?;
        let a = g.leaky_relu(a, LEAKY_SLOPE)?;
        self.fc5.forward(g, b, a)
    }

    /// `times` is `[0, t_1, ..., t_m]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        x: Var,
        times: &[f64],
        ctx: &mut ForwardCtx<'_>,
        solver: &SolverConfig,
    ) -> Result<DiscriminatorOutput> {
        let h0 = self.trunk(g, b, x, ctx)?;
        let (hx, states) = if self.use_trajectory {
            let states = solve_checkpoints_var(g, b, &self.field, ctx, h0, times, solver)?;
            (g.concat_cols(&states)?, states)
        } else {
            (h0, vec![h0])
        };
        let score = self.head(g, b, hx)?;
        Ok(DiscriminatorOutput { score, hx, states })
    }
}
