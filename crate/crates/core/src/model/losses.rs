//! Gradient penalty and condition-matching loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{ForwardCtx, Graph, Matrix, ParamStore, Var};
use crate::odeint::SolverConfig;

use super::discriminator::Discriminator;

/// Added under the square root of per-row gradient norms.
const NORM_EPS: f64 = 1e-12;
/// Size of the finite-difference probe `‖εV‖` relative to the input scale.
const FD_PROBE: f64 = 1e-5;

/// How the parameter gradient of the penalty is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// Differentiate the recorded input-gradient graph.
    #[default]
    Exact,
    /// Central difference of parameter gradients along the penalty's
    /// input-space direction (a Hessian-vector product).
    FiniteDifference,
}

/// Sum of scores for a value-level input, normalized with the batch's own
/// statistics (not committed) and without dropout.
fn score_graph(
    d: &Discriminator,
    store: &ParamStore,
    x: &Matrix,
    times: &[f64],
    solver: &SolverConfig,
    params_trainable: bool,
) -> Result<(Graph, crate::numkit::Binding, Var, Var)> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, params_trainable);
    let xv = g.leaf(x.clone());
    let mut ctx = ForwardCtx::train_no_dropout().without_stat_updates();
    let out = d.forward(&mut g, &b, xv, times, &mut ctx, solver)?;
    let s = g.sum_all(out.score)?;
    Ok((g, b, xv, s))
}

/// `λ · mean_r (‖∇_{x̄_r} D(x̄)‖ - 1)²`, with its parameter gradient
/// accumulated into `store` when `accumulate` is set. Returns the penalty.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty(
    d: &Discriminator,
    store: &mut ParamStore,
    xbar: &Matrix,
    times: &[f64],
    lambda: f64,
    solver: &SolverConfig,
    mode: PenaltyMode,
    accumulate: bool,
) -> Result<f64> {
    let n = xbar.rows() as f64;
    match mode {
        PenaltyMode::Exact => {
            let (mut g, b, xv, s) = score_graph(d, store, xbar, times, solver, true)?;
            let gx = g.grad_graph(s, &[xv])?[0];
            let sq = g.square(gx)?;
            let ss = g.sum_cols(sq)?;
            let ss = g.add_scalar(ss, NORM_EPS)?;
            let norm = g.sqrt(ss)?;
            let dev = g.add_scalar(norm, -1.0)?;
            let dev2 = g.square(dev)?;
            let mean = g.mean_all(dev2)?;
            let pen = g.scale(mean, lambda)?;
            let value = g.value(pen).item();
            if accumulate {
                store.backward_into(&g, pen, &b)?;
            }
            Ok(value)
        }
        PenaltyMode::FiniteDifference => {
            let (g, _, xv, s) = score_graph(d, store, xbar, times, solver, false)?;
            let gx = g.backward(s, &[xv])?.pop().expect("one gradient");
            drop(g);
            let mut value = 0.0;
            let mut v = Matrix::zeros(gx.rows(), gx.cols());
            for r in 0..gx.rows() {
                let row = gx.row(r);
                let norm = (row.iter().map(|x| x * x).sum::<f64>() + NORM_EPS).sqrt();
                value += (norm - 1.0).powi(2);
                let k = 2.0 * lambda / n * (norm - 1.0) / norm;
                for (o, gi) in v.row_mut(r).iter_mut().zip(row) {
                    *o = k * gi;
                }
            }
            value *= lambda / n;
            if accumulate {
                let vnorm = v.frobenius_norm();
                if vnorm > 0.0 {
                    let scale = 1.0 + xbar.data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
                    let eps = FD_PROBE * scale / vnorm;
                    let mut grads = Vec::new();
                    for sign in [1.0, -1.0] {
                        let mut xs = xbar.clone();
                        xs.axpy(sign * eps, &v);
                        let (g, b, _, s) = score_graph(d, store, &xs, times, solver, true)?;
                        let ids = store.trainable_ids();
                        let wrt: Vec<Var> = ids.iter().map(|&id| b.var(id)).collect();
                        grads.push((ids, g.backward(s, &wrt)?));
                    }
                    let (ids, plus) = &grads[0];
                    let (_, minus) = &grads[1];
                    for ((id, p), m) in ids.iter().zip(plus).zip(minus) {
                        let diff = p.zip_map(m, |a, b| (a - b) / (2.0 * eps));
                        store.accumulate_grad(*id, &diff)?;
                    }
                }
            }
            Ok(value)
        }
    }
}

/// `-mean_r log d̂_s[c_s]`: cross-entropy between the condition one-hot and
/// the relaxed sample of the conditioned column. `c` doubles as the mask
/// since it has a single one per row at the conditioned position.
pub fn matching_loss(g: &mut Graph, log_soft: Option<Var>, c: &Matrix) -> Result<Option<Var>> {
    let Some(log_soft) = log_soft else { return Ok(None) };
    if g.value(log_soft).shape() != c.shape() {
        return Err(Error::Shape(format!("condition {:?} vs heads {:?}", c.shape(), g.value(log_soft).shape())));
    }
    let n = c.rows().max(1) as f64;
    let mask = g.constant(c.clone());
    let picked = g.mul(log_soft, mask)?;
    let total = g.sum_all(picked)?;
    Ok(Some(g.scale(total, -1.0 / n)?))
}
