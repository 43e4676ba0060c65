//! Isotropic Gaussian mixtures on the plane (and beyond): grid and ring
//! layouts, sampling, exact log-density and EM refits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;
use crate::preprocess::{ColumnSpec, TableSchema};
use crate::table::{format_number, Table};

/// Lower bound on refitted standard deviations.
pub const FIT_SIGMA_FLOOR: f64 = 1e-3;
const FIT_MAX_ITER: usize = 200;
const FIT_REL_TOL: f64 = 1e-8;
/// Independent EM starts per refit; the best log-likelihood wins.
pub const FIT_RESTARTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmOracle {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-component isotropic standard deviation.
    pub sigmas: Vec<f64>,
}

impl GmmOracle {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, sigmas: Vec<f64>) -> Result<Self> {
        let o = Self { weights, means, sigmas };
        o.validate()?;
        Ok(o)
    }

    /// `n x n` equal-weight components on the lattice
    /// `(i - (n-1)/2) · spacing`, centred on the origin.
    pub fn grid(n: usize, spacing: f64, sigma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("grid needs at least one component per side".into()));
        }
        let off = (n as f64 - 1.0) / 2.0;
        let means = (0..n)
            .flat_map(|i| (0..n).map(move |j| vec![(i as f64 - off) * spacing, (j as f64 - off) * spacing]))
            .collect::<Vec<_>>();
        let k = means.len();
        Self::new(vec![1.0 / k as f64; k], means, vec![sigma; k])
    }

    /// `k` equal-weight components at angles `2πi/k` on a circle.
    pub fn ring(k: usize, radius: f64, sigma: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("ring needs at least one component".into()));
        }
        let means = (0..k)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / k as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(vec![1.0 / k as f64; k], means, vec![sigma; k])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.sigmas.len() != k {
            return Err(Error::InvalidArgument(format!(
                "mixture with {k} weights, {} means and {} sigmas",
                self.means.len(),
                self.sigmas.len()
            )));
        }
        let d = self.dim();
        if d == 0 || self.means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("mixture means must share a positive dimension and be finite".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("mixture weights must be non-negative and sum to 1".into()));
        }
        if self.sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("mixture sigmas must be positive".into()));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `x`, `y` in two dimensions, otherwise `x0, x1, ...`.
    pub fn column_names(&self) -> Vec<String> {
        match self.dim() {
            2 => vec!["x".into(), "y".into()],
            d => (0..d).map(|i| format!("x{i}")).collect(),
        }
    }

    pub fn schema(&self) -> TableSchema {
        TableSchema { columns: self.column_names().into_iter().map(ColumnSpec::continuous).collect() }
    }

    /// Draws `n` points with the component index of each.
    pub fn sample_points(&self, n: usize, rng: &mut RngStream) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut points = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = rng.categorical(&self.weights);
            points.push(self.means[k].iter().map(|m| m + self.sigmas[k] * rng.normal()).collect());
            labels.push(k);
        }
        (points, labels)
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Table {
        let mut t = Table::new(self.column_names());
        for p in self.sample_points(n, rng).0 {
            t.rows.push(p.into_iter().map(format_number).collect());
        }
        t
    }

    fn log_components(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len() as f64;
        for (k, o) in out.iter_mut().enumerate() {
            let s = self.sigmas[k];
            let sq: f64 = x.iter().zip(&self.means[k]).map(|(a, m)| (a - m) * (a - m)).sum();
            *o = self.weights[k].ln() - 0.5 * d * (std::f64::consts::TAU * s * s).ln() - 0.5 * sq / (s * s);
        }
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.n_components()];
        self.log_components(x, &mut buf);
        log_sum_exp(&buf)
    }

    pub fn mean_loglik_points(&self, points: &[Vec<f64>]) -> Result<f64> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("log-likelihood of an empty sample".into()));
        }
        if let Some(p) = points.iter().find(|p| p.len() != self.dim()) {
            return Err(Error::Shape(format!("point of dimension {} for a {}-D mixture", p.len(), self.dim())));
        }
        let mut buf = vec![0.0; self.n_components()];
        let mut total = 0.0;
        for p in points {
            self.log_components(p, &mut buf);
            total += log_sum_exp(&buf);
        }
        Ok(total / points.len() as f64)
    }

    /// Numeric rows of `table`, validated against this mixture's columns.
    pub fn points(&self, table: &Table) -> Result<Vec<Vec<f64>>> {
        if table.width() != self.dim() {
            return Err(Error::Schema(format!("{} columns for a {}-D mixture", table.width(), self.dim())));
        }
        let cols = (0..self.dim()).map(|j| table.numeric_column(j)).collect::<Result<Vec<_>>>()?;
        Ok((0..table.len()).map(|r| cols.iter().map(|c| c[r]).collect()).collect())
    }

    pub fn mean_loglik(&self, table: &Table) -> Result<f64> {
        self.mean_loglik_points(&self.points(table)?)
    }

    /// EM refit with this mixture's component count; best of
    /// [`FIT_RESTARTS`] k-means++ starts.
    pub fn fit(&self, table: &Table, rng: &mut RngStream) -> Result<Self> {
        let points = self.points(table)?;
        fit_isotropic(&points, self.n_components(), rng)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let next = if d2.iter().sum::<f64>() > 0.0 { rng.categorical(&d2) } else { rng.below(points.len()) };
        centers.push(points[next].clone());
        let c = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centers
}

/// Maximum-likelihood isotropic mixture with `k` components.
pub fn fit_isotropic(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Result<GmmOracle> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("cannot refit an oracle on an empty table".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("mixture needs at least one component".into()));
    }
    let mut best: Option<(f64, GmmOracle)> = None;
    for _ in 0..FIT_RESTARTS {
        let (ll, model) = em_once(points, k, rng)?;
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, model));
        }
    }
    Ok(best.expect("at least one restart").1)
}

fn em_once(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Result<(f64, GmmOracle)> {
    let n = points.len();
    let d = points[0].len();
    let means = kmeans_pp(points, k, rng);
    let mut spread = 0.0;
    let centroid: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    for p in points {
        spread += sq_dist(p, &centroid);
    }
    let s0 = (spread / (n * d) as f64).sqrt().max(FIT_SIGMA_FLOOR);
    let mut model = GmmOracle { weights: vec![1.0 / k as f64; k], means, sigmas: vec![s0; k] };
    let mut resp = vec![0.0; n * k];
    let mut prev = f64::NEG_INFINITY;
    let mut ll = prev;
    for _ in 0..FIT_MAX_ITER {
        // E step.
        ll = 0.0;
        for (r, p) in points.iter().enumerate() {
            let row = &mut resp[r * k..(r + 1) * k];
            model.log_components(p, row);
            let lse = log_sum_exp(row);
            ll += lse;
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        ll /= n as f64;
        // M step.
        for c in 0..k {
            let nk: f64 = (0..n).map(|r| resp[r * k + c]).sum();
            if nk < 1e-10 {
                model.weights[c] = 0.0;
                continue;
            }
            let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|r| resp[r * k + c] * points[r][j]).sum::<f64>() / nk).collect();
            let ss: f64 = (0..n).map(|r| resp[r * k + c] * sq_dist(&points[r], &mean)).sum();
            model.sigmas[c] = (ss / (nk * d as f64)).sqrt().max(FIT_SIGMA_FLOOR);
            model.means[c] = mean;
            model.weights[c] = nk / n as f64;
        }
        let total: f64 = model.weights.iter().sum();
        for w in &mut model.weights {
            *w /= total;
        }
        if (ll - prev).abs() <= FIT_REL_TOL * ll.abs().max(1.0) {
            break;
        }
        prev = ll;
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("mixture refit log-likelihood".into()));
    }
    Ok((model.mean_loglik_points(points)?, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn degenerate_grid_is_one_gaussian_at_origin() {
        let g = GmmOracle::grid(1, 3.0, 0.5).unwrap();
        assert_eq!(g.means, vec![vec![0.0, 0.0]]);
        assert_eq!(g.weights, vec![1.0]);
    }

    #[test]
    fn ring_of_four_sits_on_the_axes() {
        let r = GmmOracle::ring(4, 1.0, 0.1).unwrap();
        let expect = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
        for (m, e) in r.means.iter().zip(expect) {
            assert_abs_diff_eq!(m[0], e[0], epsilon = 1e-15);
            assert_abs_diff_eq!(m[1], e[1], epsilon = 1e-15);
        }
    }

    #[test]
    fn grid_five_has_25_equal_weights() {
        let g = GmmOracle::grid(5, 2.0, 0.05).unwrap();
        assert_eq!(g.n_components(), 25);
        assert!(g.weights.iter().all(|&w| w == 1.0 / 25.0));
        assert_eq!(g.means[0], vec![-4.0, -4.0]);
    }

    #[test]
    fn standard_normal_at_origin() {
        let g = GmmOracle::new(vec![1.0], vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        assert_abs_diff_eq!(g.log_density(&[0.0, 0.0]), -(std::f64::consts::TAU).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(g.log_density(&[0.0, 0.0]), -1.837877, epsilon = 1e-6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(GmmOracle::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).is_err());
        assert!(GmmOracle::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GmmOracle::grid(0, 1.0, 1.0).is_err());
    }

    #[test]
    fn refit_on_empty_table_fails() {
        let g = GmmOracle::ring(3, 1.0, 0.1).unwrap();
        let mut rng = RngStream::new(0, Stream::Test);
        assert!(g.fit(&Table::new(g.column_names()), &mut rng).is_err());
    }

    #[test]
    fn sample_table_round_trips_through_loglik() {
        let g = GmmOracle::ring(8, 1.0, 0.05).unwrap();
        let mut rng = RngStream::new(5, Stream::Test);
        let t = g.sample(200, &mut rng);
        let ll = g.mean_loglik(&t).unwrap();
        assert!(ll.is_finite() && ll > 0.0, "{ll}");
    }
}
