//! One-dimensional Gaussian mixtures fitted by EM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const PRUNE_WEIGHT: f64 = 0.005;
pub const EM_MAX_ITER: usize = 100;
pub const EM_REL_TOL: f64 = 1e-6;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gmm1 {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

pub(crate) fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Gmm1 {
    pub fn n_modes(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::InvalidArgument(format!("malformed mixture with {k} weights")));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 || self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be non-negative and sum to 1".into()));
        }
        if self.stds.iter().any(|&s| !(s > 0.0)) || self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("mixture needs finite means and positive stds".into()));
        }
        Ok(())
    }

    /// `Pr(k | x)` for every component.
    pub fn posterior(&self, x: f64) -> Vec<f64> {
        let logs: Vec<f64> =
            (0..self.n_modes()).map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.stds[k])).collect();
        let lse = log_sum_exp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let logs: Vec<f64> =
            (0..self.n_modes()).map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.stds[k])).collect();
        log_sum_exp(&logs)
    }

    fn total_log_lik(&self, xs: &[f64]) -> f64 {
        xs.iter().map(|&x| self.log_density(x)).sum()
    }

    fn single(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self { weights: vec![1.0], means: vec![mean], stds: vec![var.sqrt().max(SIGMA_FLOOR)] }
    }
}

/// 1-D k-means++ seeding.
fn kmeans_pp(xs: &[f64], k: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut centers = vec![xs[rng.below(xs.len())]];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 { xs[rng.categorical(&d2)] } else { xs[rng.below(xs.len())] };
        centers.push(next);
        for (d, x) in d2.iter_mut().zip(xs) {
            *d = d.min((x - next).powi(2));
        }
    }
    centers.sort_by(f64::total_cmp);
    centers
}

/// EM with `k` components. Returns the mixture and its total log-likelihood.
pub fn fit_em(xs: &[f64], k: usize, rng: &mut RngStream) -> Result<(Gmm1, f64)> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a mixture to no data".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    if k == 1 {
        let g = Gmm1::single(xs);
        let ll = g.total_log_lik(xs);
        return Ok((g, ll));
    }
    let n = xs.len();
    let global = Gmm1::single(xs);
    let means = kmeans_pp(xs, k, rng);
    let mut gmm = Gmm1 { weights: vec![1.0 / k as f64; k], means, stds: vec![global.stds[0]; k] };
    let mut resp = vec![0.0; n * k];
    let mut prev = f64::NEG_INFINITY;
    let mut logs = vec![0.0; k];
    for _ in 0..EM_MAX_ITER {
        let mut ll = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            for j in 0..k {
                logs[j] = gmm.weights[j].ln() + log_normal(x, gmm.means[j], gmm.stds[j]);
            }
            let lse = log_sum_exp(&logs);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (logs[j] - lse).exp();
            }
        }
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk <= 1e-12 {
                gmm.weights[j] = 1e-12;
                continue;
            }
            let mu = (0..n).map(|i| resp[i * k + j] * xs[i]).sum::<f64>() / nk;
            let var = (0..n).map(|i| resp[i * k + j] * (xs[i] - mu).powi(2)).sum::<f64>() / nk;
            gmm.weights[j] = nk / n as f64;
            gmm.means[j] = mu;
            gmm.stds[j] = var.sqrt().max(SIGMA_FLOOR);
        }
        let total: f64 = gmm.weights.iter().sum();
        gmm.weights.iter_mut().for_each(|w| *w /= total);
        if prev.is_finite() && (ll - prev).abs() <= EM_REL_TOL * prev.abs() {
            break;
        }
        prev = ll;
    }
    let ll = gmm.total_log_lik(xs);
    Ok((gmm, ll))
}

fn bic(ll: f64, k: usize, n: usize) -> f64 {
    -2.0 * ll + (3 * k - 1) as f64 * (n as f64).ln()
}

/// Fits every component count up to `max_modes`, keeps the one with the
/// lowest BIC, then prunes components lighter than [`PRUNE_WEIGHT`].
pub fn fit_column(xs: &[f64], max_modes: usize, rng: &mut RngStream) -> Result<Gmm1> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("cannot fit a mixture to no data".into()));
    }
    if max_modes == 0 {
        return Err(Error::InvalidArgument("max_modes must be at least 1".into()));
    }
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let cap = max_modes.min(distinct.len());
    let mut best: Option<(f64, Gmm1)> = None;
    for k in 1..=cap {
        let (g, ll) = fit_em(xs, k, rng)?;
        let score = bic(ll, k, xs.len());
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, g));
        }
    }
    let (_, g) = best.expect("at least one fit");
    Ok(prune(g))
}

fn prune(g: Gmm1) -> Gmm1 {
    let keep: Vec<usize> = (0..g.n_modes()).filter(|&k| g.weights[k] >= PRUNE_WEIGHT).collect();
    let keep = if keep.is_empty() {
        vec![(0..g.n_modes()).max_by(|&a, &b| g.weights[a].total_cmp(&g.weights[b])).expect("non-empty")]
    } else {
        keep
    };
    let total: f64 = keep.iter().map(|&k| g.weights[k]).sum();
    Gmm1 {
        weights: keep.iter().map(|&k| g.weights[k] / total).collect(),
        means: keep.iter().map(|&k| g.means[k]).collect(),
        stds: keep.iter().map(|&k| g.stds[k]).collect(),
    }
}
