//! k-means++ clustering and the silhouette protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;

use super::metrics::silhouette;

const LLOYD_MAX_ITER: usize = 300;
/// Independent seedings per `K`; the lowest inertia wins.
pub const KMEANS_RESTARTS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeans {
    /// Index of the nearest centre, first on ties.
    pub fn assign_one(&self, p: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centers.iter().enumerate() {
            let d = sq(p, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    pub fn assign(&self, points: &[Vec<f64>]) -> Vec<usize> {
        points.iter().map(|p| self.assign_one(p)).collect()
    }

    pub fn fit(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Result<Self> {
        if k == 0 || k > points.len() {
            return Err(Error::InvalidArgument(format!("K = {k} for {} rows", points.len())));
        }
        let mut best: Option<KMeans> = None;
        for _ in 0..KMEANS_RESTARTS {
            let km = lloyd(points, seed_pp(points, k, rng));
            if best.as_ref().is_none_or(|b| km.inertia < b.inertia) {
                best = Some(km);
            }
        }
        Ok(best.expect("at least one restart"))
    }
}

fn seed_pp(points: &[Vec<f64>], k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.below(points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq(p, &centers[0])).collect();
    while centers.len() < k {
        let next = if d2.iter().sum::<f64>() > 0.0 { rng.categorical(&d2) } else { rng.below(points.len()) };
        centers.push(points[next].clone());
        let c = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq(p, c));
        }
    }
    centers
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> KMeans {
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..LLOYD_MAX_ITER {
        let km = KMeans { centers: centers.clone(), inertia: 0.0 };
        let next = km.assign(points);
        if next == labels {
            break;
        }
        labels = next;
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut counts = vec![0usize; centers.len()];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    let km = KMeans { centers, inertia: 0.0 };
    let inertia = points.iter().map(|p| sq(p, &km.centers[km.assign_one(p)])).sum();
    KMeans { inertia, ..km }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    /// Chosen number of clusters.
    pub k: usize,
    /// Silhouette of each table under the centres found on the synthetic
    /// table; `None` when it is undefined.
    pub silhouette_synthetic: Option<f64>,
    pub silhouette_train: Option<f64>,
    pub silhouette_test: Option<f64>,
    /// Every synthetic row is identical.
    pub degenerate: bool,
}

/// Runs k-means++ on `synthetic` for `K ∈ {c, 2c, 3c}` (those not above
/// the row count), keeps the `K` with the best synthetic silhouette and
/// scores the other tables against its centres.
pub fn clustering_score(
    synthetic: &[Vec<f64>],
    train: &[Vec<f64>],
    test: &[Vec<f64>],
    classes: usize,
    rng: &mut RngStream,
) -> Result<ClusteringReport> {
    if classes == 0 {
        return Err(Error::InvalidArgument("class count must be positive".into()));
    }
    if classes > synthetic.len() {
        return Err(Error::InvalidArgument(format!("K = {classes} exceeds the {} synthetic rows", synthetic.len())));
    }
    let degenerate = synthetic.iter().all(|p| p == &synthetic[0]);
    if degenerate {
        return Ok(ClusteringReport {
            k: classes,
            silhouette_synthetic: None,
            silhouette_train: None,
            silhouette_test: None,
            degenerate,
        });
    }
    let mut best: Option<(f64, usize, KMeans)> = None;
    for k in [classes, 2 * classes, 3 * classes].into_iter().filter(|&k| k <= synthetic.len()) {
        let km = KMeans::fit(synthetic, k, rng)?;
        let s = silhouette(synthetic, &km.assign(synthetic))?.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
            best = Some((s, k, km));
        }
    }
    let (s, k, km) = best.expect("K = classes is always a candidate");
    Ok(ClusteringReport {
        k,
        silhouette_synthetic: s.is_finite().then_some(s),
        silhouette_train: silhouette(train, &km.assign(train))?,
        silhouette_test: silhouette(test, &km.assign(test))?,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;

    fn blobs(rng: &mut RngStream, n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { -10.0 } else { 10.0 };
                vec![c + 0.1 * rng.normal(), 0.1 * rng.normal()]
            })
            .collect()
    }

    #[test]
    fn separated_blobs_choose_two() {
        let mut rng = RngStream::new(4, Stream::Test);
        let f = blobs(&mut rng, 60);
        let tr = blobs(&mut rng, 60);
        let te = blobs(&mut rng, 60);
        let r = clustering_score(&f, &tr, &te, 2, &mut rng).unwrap();
        assert_eq!(r.k, 2);
        for s in [r.silhouette_synthetic, r.silhouette_train, r.silhouette_test] {
            assert!(s.unwrap() > 0.9);
        }
    }

    #[test]
    fn identical_rows_are_flagged() {
        let f = vec![vec![1.0, 2.0]; 10];
        let mut rng = RngStream::new(0, Stream::Test);
        let r = clustering_score(&f, &f, &f, 2, &mut rng).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.silhouette_synthetic, None);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let f = vec![vec![0.0], vec![1.0]];
        let mut rng = RngStream::new(0, Stream::Test);
        assert!(clustering_score(&f, &f, &f, 3, &mut rng).is_err());
    }
}
