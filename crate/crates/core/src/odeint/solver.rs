//! Explicit Runge–Kutta steppers shared by every state representation.

use crate::error::{Error, Result};

use super::{Method, SolverConfig};

/// What a stepper needs from a state representation.
pub trait OdeSystem {
    type State: Clone;

    fn rhs(&mut self, t: f64, y: &Self::State) -> Result<Self::State>;

    /// `base + Σ k_i * s_i`
    fn combine(&mut self, base: &Self::State, terms: &[(f64, &Self::State)]) -> Result<Self::State>;

    fn values<'a>(&'a self, y: &'a Self::State) -> &'a [f64];

    /// Position to roll back to when a step is rejected.
    fn mark(&self) -> usize {
        0
    }

    fn rollback(&mut self, _mark: usize) {}

    /// Called after every accepted step with the new state and the reusable
    /// last stage, if any; may compact internal storage.
    fn accepted(&mut self, y: Self::State, fsal: Option<Self::State>) -> (Self::State, Option<Self::State>) {
        (y, fsal)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
/// Fifth-order weights; also the last stage row (FSAL).
const B5: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// `b5 - b4` for all seven stages.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;

fn weighted_rms(err: impl Iterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for e in err {
        s += e * e;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

fn scale_of(atol: f64, rtol: f64, a: f64, b: f64) -> f64 {
    atol + rtol * a.abs().max(b.abs())
}

/// Integrates from `t0` to `t1` (either direction).
pub fn integrate<S: OdeSystem>(
    sys: &mut S,
    y0: S::State,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(S::State, SolveStats)> {
    cfg.validate()?;
    if t0 == t1 {
        return Ok((y0, SolveStats::default()));
    }
    match cfg.method {
        Method::Rk4 => rk4(sys, y0, t0, t1, cfg),
        Method::Dopri5 => dopri5(sys, y0, t0, t1, cfg),
    }
}

/// Number of fixed RK4 steps over `[t0, t1]`.
pub fn rk4_steps(t0: f64, t1: f64, steps_per_unit: usize) -> usize {
    ((steps_per_unit as f64 * (t1 - t0).abs() - 1e-9).ceil() as usize).max(1)
}

fn rk4<S: OdeSystem>(
    sys: &mut S,
    mut y: S::State,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(S::State, SolveStats)> {
    let n = rk4_steps(t0, t1, cfg.fixed_steps);
    if n > cfg.max_steps {
        return Err(Error::Solver(format!("rk4 needs {n} steps, max_steps is {}", cfg.max_steps)));
    }
    let h = (t1 - t0) / n as f64;
    let mut stats = SolveStats::default();
    for i in 0..n {
        let t = t0 + i as f64 * h;
        let k1 = sys.rhs(t, &y)?;
        let y2 = sys.combine(&y, &[(0.5 * h, &k1)])?;
        let k2 = sys.rhs(t + 0.5 * h, &y2)?;
        let y3 = sys.combine(&y, &[(0.5 * h, &k2)])?;
        let k3 = sys.rhs(t + 0.5 * h, &y3)?;
        let y4 = sys.combine(&y, &[(h, &k3)])?;
        let k4 = sys.rhs(t + h, &y4)?;
        let next = sys.combine(&y, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)])?;
        y = sys.accepted(next, None).0;
        stats.accepted += 1;
        stats.rhs_evals += 4;
    }
    Ok((y, stats))
}

fn initial_step<S: OdeSystem>(
    sys: &mut S,
    y0: &S::State,
    f0: &S::State,
    t0: f64,
    dir: f64,
    span: f64,
    cfg: &SolverConfig,
) -> Result<f64> {
    let (d0, d1) = {
        let yv = sys.values(y0);
        let fv = sys.values(f0);
        let d0 = weighted_rms(yv.iter().map(|&y| y / scale_of(cfg.atol, cfg.rtol, y, y)));
        let d1 = weighted_rms(yv.iter().zip(fv).map(|(&y, &f)| f / scale_of(cfg.atol, cfg.rtol, y, y)));
        (d0, d1)
    };
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let mark = sys.mark();
    let y1 = sys.combine(y0, &[(dir * h0, f0)])?;
    let f1 = sys.rhs(t0 + dir * h0, &y1)?;
    let d2 = {
        let yv = sys.values(y0);
        let f0v = sys.values(f0);
        let f1v = sys.values(&f1);
        weighted_rms(
            yv.iter().zip(f0v).zip(f1v).map(|((&y, &a), &b)| (b - a) / scale_of(cfg.atol, cfg.rtol, y, y)),
        ) / h0
    };
    sys.rollback(mark);
    let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(1.0 / 5.0) };
    Ok((100.0 * h0).min(h1).min(span))
}

fn dopri5<S: OdeSystem>(
    sys: &mut S,
    y0: S::State,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(S::State, SolveStats)> {
    let dir = if t1 > t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut stats = SolveStats::default();
    let mut t = t0;
    let mut y = y0;
    let mut k1 = sys.rhs(t, &y)?;
    stats.rhs_evals += 1;
    let mut h = match cfg.first_step {
        Some(h) => h.min(span),
        None => initial_step(sys, &y, &k1, t, dir, span, cfg)?,
    };
    let mut steps = 0usize;
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        steps += 1;
        if steps > cfg.max_steps {
            return Err(Error::Solver(format!("exceeded max_steps = {} at t = {t}", cfg.max_steps)));
        }
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Solver(format!("step size underflow at t = {t}")));
        }
        let sh = dir * h;
        let mark = sys.mark();
        let y2 = sys.combine(&y, &[(sh * A2[0], &k1)])?;
        let k2 = sys.rhs(t + C[1] * sh, &y2)?;
        let y3 = sys.combine(&y, &[(sh * A3[0], &k1), (sh * A3[1], &k2)])?;
        let k3 = sys.rhs(t + C[2] * sh, &y3)?;
        let y4 = sys.combine(&y, &[(sh * A4[0], &k1), (sh * A4[1], &k2), (sh * A4[2], &k3)])?;
        let k4 = sys.rhs(t + C[3] * sh, &y4)?;
        let y5 = sys.combine(
            &y,
            &[(sh * A5[0], &k1), (sh * A5[1], &k2), (sh * A5[2], &k3), (sh * A5[3], &k4)],
        )?;
        let k5 = sys.rhs(t + C[4] * sh, &y5)?;
        let y6 = sys.combine(
            &y,
            &[(sh * A6[0], &k1), (sh * A6[1], &k2), (sh * A6[2], &k3), (sh * A6[3], &k4), (sh * A6[4], &k5)],
        )?;
        let k6 = sys.rhs(t + C[5] * sh, &y6)?;
        let y_new = sys.combine(
            &y,
            &[(sh * B5[0], &k1), (sh * B5[2], &k3), (sh * B5[3], &k4), (sh * B5[4], &k5), (sh * B5[5], &k6)],
        )?;
        let k7 = sys.rhs(t + sh, &y_new)?;
        stats.rhs_evals += 6;

        let err = {
            let ks = [&k1, &k2, &k3, &k4, &k5, &k6, &k7].map(|k| sys.values(k));
            let yv = sys.values(&y);
            let ynv = sys.values(&y_new);
            weighted_rms((0..yv.len()).map(|i| {
                let e: f64 = E.iter().zip(&ks).map(|(&e, k)| e * k[i]).sum::<f64>() * sh;
                e / scale_of(cfg.atol, cfg.rtol, yv[i], ynv[i])
            }))
        };
        if !err.is_finite() {
            return Err(Error::NonFinite(format!("ODE state at t = {t}")));
        }
        if err <= 1.0 {
            t = if last { t1 } else { t + sh };
            let (yn, k) = sys.accepted(y_new, Some(k7));
            y = yn;
            k1 = k.expect("stage kept");
            stats.accepted += 1;
            let factor = if err == 0.0 { MAX_FACTOR } else { (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR) };
            h *= factor;
        } else {
            sys.rollback(mark);
            stats.rejected += 1;
            h *= (SAFETY * err.powf(-0.2)).clamp(MIN_FACTOR, 1.0);
        }
    }
    Ok((y, stats))
}

/// A flat-vector system driven by a closure.
pub struct FlatSystem<F> {
    pub f: F,
}

impl<F> OdeSystem for FlatSystem<F>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    type State = Vec<f64>;

    fn rhs(&mut self, t: f64, y: &Vec<f64>) -> Result<Vec<f64>> {
        let out = (self.f)(t, y)?;
        if out.len() != y.len() {
            return Err(Error::Shape(format!("vector field returned {} values for a {}-state", out.len(), y.len())));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("vector field at t = {t}")));
        }
        Ok(out)
    }

    fn combine(&mut self, base: &Vec<f64>, terms: &[(f64, &Vec<f64>)]) -> Result<Vec<f64>> {
        let mut out = base.clone();
        for (k, s) in terms {
            if *k != 0.0 {
                for (o, v) in out.iter_mut().zip(s.iter()) {
                    *o += k * v;
                }
            }
        }
        Ok(out)
    }

    fn values<'a>(&'a self, y: &'a Vec<f64>) -> &'a [f64] {
        y
    }
}

/// Convenience wrapper for closures over plain vectors.
pub fn integrate_flat<F>(f: F, y0: Vec<f64>, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<(Vec<f64>, SolveStats)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut sys = FlatSystem { f };
    integrate(&mut sys, y0, t0, t1, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(rtol: f64, atol: f64) -> SolverConfig {
        SolverConfig { rtol, atol, ..SolverConfig::testing() }
    }

    #[test]
    fn tableau_rows_sum_to_nodes() {
        let rows: [&[f64]; 5] = [&A2, &A3, &A4, &A5, &A6];
        for (i, row) in rows.iter().enumerate() {
            assert!((row.iter().sum::<f64>() - C[i + 1]).abs() < 1e-14);
        }
        assert!((B5.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        assert!(E.iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn exponential_growth() {
        let (y, _) = integrate_flat(|_, y| Ok(y.to_vec()), vec![1.0], 0.0, 1.0, &cfg(1e-7, 1e-9)).unwrap();
        assert!((y[0] - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn decay_and_backward_direction() {
        let c = cfg(1e-8, 1e-10);
        let (y, _) = integrate_flat(|_, y| Ok(vec![-y[0]]), vec![1.0], 0.0, 5.0, &c).unwrap();
        assert!((y[0] - (-5.0f64).exp()).abs() < 1e-8);
        let (back, _) = integrate_flat(|_, y| Ok(vec![-y[0]]), y, 5.0, 0.0, &c).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_field_is_exact() {
        let (y, _) = integrate_flat(|_, y| Ok(vec![0.0; y.len()]), vec![1.5, -2.0], 0.0, 3.0, &cfg(1e-3, 1e-4)).unwrap();
        assert_eq!(y, vec![1.5, -2.0]);
    }

    #[test]
    fn max_steps_is_enforced() {
        let c = SolverConfig { max_steps: 2, ..cfg(1e-12, 1e-12) };
        let r = integrate_flat(|t, _| Ok(vec![(50.0 * t).sin()]), vec![0.0], 0.0, 10.0, &c);
        assert!(matches!(r, Err(Error::Solver(_))));
    }

    #[test]
    fn rk4_step_count() {
        assert_eq!(rk4_steps(0.0, 1.0, 10), 10);
        assert_eq!(rk4_steps(0.0, 0.25, 10), 3);
        assert_eq!(rk4_steps(0.3, 0.3000001, 10), 1);
    }
}
