//! Conditional generator with an ODE transform of its input.

use crate::error::Result;
use crate::numkit::layers::{l2_normalize, one_hot_argmax, BatchNorm1d, Linear, LEAKY_SLOPE};
use crate::numkit::{Binding, ForwardCtx, Graph, ParamStore, RngStream, Var};
use crate::odeint::{solve_var, OdeFunc, SolverConfig};
use crate::preprocess::Span;

/// Number of affine + leaky layers in the generator's vector field.
pub const G_FIELD_LAYERS: usize = 8;

/// `g(p, t)`: eight affine + leaky layers applied to `p/‖p‖ ⊕ t`.
#[derive(Clone, Debug)]
pub struct GeneratorField {
    pub layers: Vec<Linear>,
    pub dim: usize,
}

impl GeneratorField {
    pub fn new(store: &mut ParamStore, rng: &mut RngStream, dim: usize) -> Self {
        let mut layers = vec![Linear::new(store, rng, "g.ode.fc6", dim + 1, dim)];
        for i in 7..6 + G_FIELD_LAYERS {
            layers.push(Linear::new(store, rng, &format!("g.ode.fc{i}"), dim, dim));
        }
        Self { layers, dim }
    }
}

impl OdeFunc for GeneratorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, g: &mut Graph, params: &Binding, h: Var, t: Var, _ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let n = g.value(h).rows();
        let (normed, flagged) = l2_normalize(g, h)?;
        if flagged {
            log::debug!("zero-norm generator state left unnormalized");
        }
        let tcol = g.broadcast_all(t, n, 1)?;
        let mut x = g.concat_cols(&[normed, tcol])?;
        for layer in &self.layers {
            let a = layer.forward(g, params, x)?;
            x = g.leaky_relu(a, LEAKY_SLOPE)?;
        }
        Ok(x)
    }
}

/// How categorical heads turn logits into one-hots.
pub enum Sampling<'a> {
    /// Straight-through Gumbel-softmax.
    Gumbel(&'a mut RngStream),
    /// Argmax of the logits, no noise.
    Argmax,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub z_dim: usize,
    pub cond_width: usize,
    pub hidden: usize,
    pub tau: f64,
    /// `false` feeds `z ⊕ c` straight to the trunk.
    pub use_ode: bool,
    pub field: GeneratorField,
    pub fc1: Linear,
    pub bn1: BatchNorm1d,
    pub fc2: Linear,
    pub bn2: BatchNorm1d,
    /// All α̂, β̂ and d̂ heads as one affine map, sliced per column.
    pub head: Linear,
    pub spans: Vec<Span>,
}

pub struct GeneratorOutput {
    pub p0: Var,
    pub z_prime: Var,
    /// Encoded row batch with hard one-hots.
    pub x: Var,
    /// Log of the relaxed categorical sample of every discrete column,
    /// concatenated in the condition-vector layout.
    pub log_soft: Option<Var>,
}

impl Generator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut RngStream,
        z_dim: usize,
        cond_width: usize,
        hidden: usize,
        spans: Vec<Span>,
        out_width: usize,
        tau: f64,
        use_ode: bool,
    ) -> Self {
        let p = z_dim + cond_width;
        let field = GeneratorField::new(store, rng, p);
        let fc1 = Linear::new(store, rng, "g.fc1", p, hidden);
        let bn1 = BatchNorm1d::new(store, "g.bn1", hidden);
        let fc2 = Linear::new(store, rng, "g.fc2", p + hidden, hidden);
        let bn2 = BatchNorm1d::new(store, "g.bn2", hidden);
        let head = Linear::new(store, rng, "g.head", p + 2 * hidden, out_width);
        Self { z_dim, cond_width, hidden, tau, use_ode, field, fc1, bn1, fc2, bn2, head, spans }
    }

    pub fn p_dim(&self) -> usize {
        self.z_dim + self.cond_width
    }

    fn categorical(&self, g: &mut Graph, logits: Var, sampling: &mut Sampling<'_>, want_log: bool) -> Result<(Var, Option<Var>)> {
        let noisy = match sampling {
            Sampling::Gumbel(rng) => {
                let (r, c) = g.value(logits).shape();
                let noise = g.constant(rng.gumbel_matrix(r, c));
                g.add(logits, noise)?
            }
            Sampling::Argmax => logits,
        };
        let scaled = g.scale(noisy, 1.0 / self.tau)?;
        let soft = g.softmax(scaled)?;
        let hard = one_hot_argmax(g.value(soft));
        let out = g.straight_through(soft, hard)?;
        let log = if want_log { Some(g.log_softmax(scaled)?) } else { None };
        Ok((out, log))
    }

    /// `z'` alone.
    pub fn transform(
        &self,
        g: &mut Graph,
        b: &Binding,
        p0: Var,
        ctx: &mut ForwardCtx<'_>,
        solver: &SolverConfig,
    ) -> Result<Var> {
        if self.use_ode {
            solve_var(g, b, &self.field, ctx, p0, 0.0, 1.0, solver)
        } else {
            Ok(p0)
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binding,
        z: Var,
        c: Var,
        ctx: &mut ForwardCtx<'_>,
        mut sampling: Sampling<'_>,
        solver: &SolverConfig,
    ) -> Result<GeneratorOutput> {
        let p0 = if self.cond_width > 0 { g.concat_cols(&[z, c])? } else { z };
        let z_prime = self.transform(g, b, p0, ctx, solver)?;
        let a1 = self.fc1.forward(g, b, z_prime)?;
        let a1 = self.bn1.forward(g, b, a1, ctx)?;
        let a1 = g.relu(a1)?;
        let h0 = g.concat_cols(&[z_prime, a1])?;
        let a2 = self.fc2.forward(g, b, h0)?;
        let a2 = self.bn2.forward(g, b, a2, ctx)?;
        let a2 = g.relu(a2)?;
        let h1 = g.concat_cols(&[h0, a2])?;
        let logits = self.head.forward(g, b, h1)?;

        let mut parts = Vec::with_capacity(2 * self.spans.len());
        let mut logs = Vec::new();
        for span in &self.spans {
            match *span {
                Span::Continuous { alpha, beta, modes } => {
                    let a = g.slice_cols(logits, alpha, 1)?;
                    parts.push(g.tanh(a)?);
                    let l = g.slice_cols(logits, beta, modes)?;
                    parts.push(self.categorical(g, l, &mut sampling, false)?.0);
                }
                Span::Discrete { start, len } => {
                    let l = g.slice_cols(logits, start, len)?;
                    let (d, log) = self.categorical(g, l, &mut sampling, true)?;
                    parts.push(d);
                    logs.extend(log);
                }
            }
        }
        let x = g.concat_cols(&parts)?;
        let log_soft = if logs.is_empty() { None } else { Some(g.concat_cols(&logs)?) };
        Ok(GeneratorOutput { p0, z_prime, x, log_soft })
    }
}
