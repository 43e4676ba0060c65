//! Classification, regression and clustering scores.

use crate::error::{Error, Result};

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} labels against {b} predictions")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("metric of an empty sample".into()));
    }
    Ok(())
}

fn f1_for(truth: &[usize], pred: &[usize], class: usize) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&t, &p) in truth.iter().zip(pred) {
        match (t == class, p == class) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// F1 of the `positive` class. Zero when it is never predicted correctly.
pub fn f1_binary(truth: &[usize], pred: &[usize], positive: usize) -> Result<f64> {
    check_len(truth.len(), pred.len())?;
    Ok(f1_for(truth, pred, positive))
}

/// Unweighted mean of per-class F1 over every class that occurs in either
/// the truth or the predictions.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_len(truth.len(), pred.len())?;
    let mut classes: Vec<usize> = truth.iter().chain(pred).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    Ok(classes.iter().map(|&c| f1_for(truth, pred, c)).sum::<f64>() / classes.len() as f64)
}

/// Coefficient of determination. A constant truth scores 1 when matched
/// exactly and 0 otherwise.
pub fn r2(truth: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(truth.len(), pred.len())?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distances. Members of singleton clusters
/// score 0. `None` unless there are at least two non-empty clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<Option<f64>> {
    check_len(points.len(), labels.len())?;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for (i, p) in points.iter().enumerate() {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (q, &l) in points.iter().zip(labels) {
            sums[l] += euclidean(p, q);
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(Some(total / points.len() as f64))
}
