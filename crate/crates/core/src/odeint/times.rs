//! Learnable checkpoint times kept ordered by construction.
//!
//! Unconstrained values `u_1..u_m` map to `t_i = C_i / Z` with
//! `C_i = Σ_{k≤i} softplus(u_k)`. `Z = C_m` pins `t_m = 1`; when the last
//! time is learnable as well, `Z = C_m + softplus(v)` for an extra slack `v`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on raw values, keeping every gap strictly positive.
const RAW_FLOOR: f64 = -30.0;
const SLACK_INIT: f64 = -5.0;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inverse(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimePoints {
    raw: Vec<f64>,
    slack: Option<f64>,
    frozen: bool,
}

impl TimePoints {
    /// Equally spaced `t_i = i/m`, learnable.
    pub fn uniform(m: usize, learn_last: bool) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("at least one checkpoint time is required".into()));
        }
        let one = softplus_inverse(1.0);
        Ok(Self { raw: vec![one; m], slack: learn_last.then_some(SLACK_INIT), frozen: false })
    }

    /// `t_i = i/m`, never updated.
    pub fn fixed(m: usize) -> Result<Self> {
        let mut t = Self::uniform(m, false)?;
        t.frozen = true;
        Ok(t)
    }

    pub fn m(&self) -> usize {
        self.raw.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    fn cumulative(&self) -> (Vec<f64>, f64) {
        let mut c = Vec::with_capacity(self.raw.len());
        let mut acc = 0.0;
        for &u in &self.raw {
            acc += softplus(u);
            c.push(acc);
        }
        let z = acc + self.slack.map_or(0.0, softplus);
        (c, z)
    }

    /// `[t_1, ..., t_m]`.
    pub fn times(&self) -> Vec<f64> {
        let m = self.raw.len();
        if self.frozen {
            return (1..=m).map(|i| i as f64 / m as f64).collect();
        }
        let (c, z) = self.cumulative();
        let mut t: Vec<f64> = c.iter().map(|ci| ci / z).collect();
        if self.slack.is_none() {
            t[m - 1] = 1.0;
        }
        t
    }

    /// `[0, t_1, ..., t_m]`.
    pub fn with_origin(&self) -> Vec<f64> {
        let mut t = vec![0.0];
        t.extend(self.times());
        t
    }

    /// Chain rule from `∂L/∂t_i` to the raw values and the slack.
    pub fn raw_grad(&self, grad_t: &[f64]) -> Result<(Vec<f64>, Option<f64>)> {
        let m = self.raw.len();
        if grad_t.len() != m {
            return Err(Error::Shape(format!("{} time gradients for {m} times", grad_t.len())));
        }
        let (c, z) = self.cumulative();
        // Σ_i g_i C_i / Z² is shared by every raw value.
        let shared: f64 = grad_t.iter().zip(&c).map(|(g, ci)| g * ci).sum::<f64>() / (z * z);
        let mut suffix = vec![0.0; m + 1];
        for i in (0..m).rev() {
            suffix[i] = suffix[i + 1] + grad_t[i];
        }
        let du = (0..m).map(|k| sigmoid(self.raw[k]) * (suffix[k] / z - shared)).collect();
        let dv = self.slack.map(|v| -sigmoid(v) * shared);
        Ok((du, dv))
    }

    /// Plain gradient step; a no-op when frozen.
    pub fn sgd_step(&mut self, grad_t: &[f64], lr: f64) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        let (du, dv) = self.raw_grad(grad_t)?;
        if du.iter().chain(dv.iter()).any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("time-point gradient".into()));
        }
        for (u, g) in self.raw.iter_mut().zip(du) {
            *u = (*u - lr * g).max(RAW_FLOOR);
        }
        if let (Some(v), Some(g)) = (self.slack.as_mut(), dv) {
            *v = (*v - lr * g).max(RAW_FLOOR);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_start() {
        let t = TimePoints::uniform(4, false).unwrap();
        for (i, ti) in t.times().iter().enumerate() {
            assert!((ti - (i + 1) as f64 / 4.0).abs() < 1e-15);
        }
        assert_eq!(t.times()[3], 1.0);
        assert_eq!(TimePoints::fixed(3).unwrap().times(), vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn raw_gradient_matches_finite_differences() {
        for learn_last in [false, true] {
            let mut tp = TimePoints::uniform(3, learn_last).unwrap();
            tp.raw = vec![0.3, -0.8, 1.1];
            let w = [0.7, -1.3, 2.0];
            let loss = |tp: &TimePoints| tp.times().iter().zip(&w).map(|(t, w)| t * w).sum::<f64>();
            let (du, dv) = tp.raw_grad(&w).unwrap();
            let eps = 1e-6;
            for k in 0..3 {
                let mut p = tp.clone();
                p.raw[k] += eps;
                let mut q = tp.clone();
                q.raw[k] -= eps;
                let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
                assert!((fd - du[k]).abs() < 1e-8, "k={k} fd={fd} an={}", du[k]);
            }
            if let Some(dv) = dv {
                let mut p = tp.clone();
                *p.slack.as_mut().unwrap() += eps;
                let mut q = tp.clone();
                *q.slack.as_mut().unwrap() -= eps;
                let fd = (loss(&p) - loss(&q)) / (2.0 * eps);
                assert!((fd - dv).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn frozen_times_never_move() {
        let mut t = TimePoints::fixed(3).unwrap();
        let before = t.times();
        t.sgd_step(&[5.0, -3.0, 1.0], 10.0).unwrap();
        assert_eq!(t.times(), before);
    }
}
