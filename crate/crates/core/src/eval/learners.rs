//! Small built-in learners: CART trees, a one-hidden-layer perceptron and
//! linear/logistic regression, all deterministic given their RNG.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::layers::{argmax, Linear};
use crate::numkit::{Adam, Graph, Matrix, ParamStore, RngStream};

pub const TREE_MAX_DEPTH: usize = 8;
pub const MLP_HIDDEN: usize = 64;
pub const MLP_EPOCHS: usize = 200;
pub const MLP_BATCH: usize = 64;
pub const MLP_LR: f64 = 1e-3;
pub const LOGISTIC_STEPS: usize = 300;
pub const LOGISTIC_LR: f64 = 0.05;
pub const RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    DecisionTree,
    Mlp,
    /// Logistic regression for classes, least squares for values.
    Linear,
}

impl LearnerKind {
    pub const ALL: [LearnerKind; 3] = [LearnerKind::DecisionTree, LearnerKind::Mlp, LearnerKind::Linear];

    pub fn name(self) -> &'static str {
        match self {
            Self::DecisionTree => "decision_tree",
            Self::Mlp => "mlp",
            Self::Linear => "linear",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(Vec<f64>),
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Self::Classes { labels, .. } => labels.len(),
            Self::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

/// Trains `kind` on `(x, y)` and predicts `x_test`.
pub fn fit_predict(kind: LearnerKind, x: &Matrix, y: &Target, x_test: &Matrix, rng: &mut RngStream) -> Result<Prediction> {
    if x.rows() != y.len() || x.rows() == 0 {
        return Err(Error::Shape(format!("{} feature rows for {} targets", x.rows(), y.len())));
    }
    if x.cols() != x_test.cols() {
        return Err(Error::Shape(format!("{} training features against {} test features", x.cols(), x_test.cols())));
    }
    match kind {
        LearnerKind::DecisionTree => {
            let tree = Tree::fit(x, y, TREE_MAX_DEPTH);
            Ok(tree.predict(x_test, y))
        }
        LearnerKind::Mlp => mlp(x, y, x_test, rng),
        LearnerKind::Linear => match y {
            Target::Classes { .. } => logistic(x, y, x_test, rng),
            Target::Values(v) => least_squares(x, v, x_test).map(Prediction::Values),
        },
    }
}

/// Column means and standard deviations of `x`; zero spreads become 1.
pub fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows().max(1) as f64;
    let mean: Vec<f64> = x.sum_rows().data().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((v, &a), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *v += (a - m) * (a - m);
        }
    }
    let std = var.into_iter().map(|v| (v / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (mean, std)
}

pub fn standardize(x: &Matrix, mean: &[f64], std: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for ((o, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(std) {
            *o = (*o - m) / s;
        }
    }
    out
}

// ---- CART -------------------------------------------------------------

enum Node {
    Leaf(f64),
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

struct Tree {
    root: Node,
}

/// Sufficient statistics of a set of targets for impurity computations.
#[derive(Clone)]
enum Stats {
    Counts(Vec<f64>),
    Moments { n: f64, sum: f64, sq: f64 },
}

impl Stats {
    fn empty(y: &Target) -> Self {
        match y {
            Target::Classes { n_classes, .. } => Self::Counts(vec![0.0; *n_classes]),
            Target::Values(_) => Self::Moments { n: 0.0, sum: 0.0, sq: 0.0 },
        }
    }

    fn add(&mut self, y: &Target, i: usize, sign: f64) {
        match (self, y) {
            (Self::Counts(c), Target::Classes { labels, .. }) => c[labels[i]] += sign,
            (Self::Moments { n, sum, sq }, Target::Values(v)) => {
                *n += sign;
                *sum += sign * v[i];
                *sq += sign * v[i] * v[i];
            }
            _ => unreachable!("statistics match the target kind"),
        }
    }

    fn n(&self) -> f64 {
        match self {
            Self::Counts(c) => c.iter().sum(),
            Self::Moments { n, .. } => *n,
        }
    }

    /// Impurity times count: Gini for classes, squared error for values.
    fn weighted_impurity(&self) -> f64 {
        match self {
            Self::Counts(c) => {
                let n: f64 = c.iter().sum();
                if n == 0.0 {
                    return 0.0;
                }
                n - c.iter().map(|k| k * k).sum::<f64>() / n
            }
            Self::Moments { n, sum, sq } => {
                if *n == 0.0 {
                    return 0.0;
                }
                (sq - sum * sum / n).max(0.0)
            }
        }
    }

    /// Majority class (lowest index on ties) or mean.
    fn leaf_value(&self) -> f64 {
        match self {
            Self::Counts(c) => argmax(c).unwrap_or(0) as f64,
            Self::Moments { n, sum, .. } => sum / n,
        }
    }
}

impl Tree {
    fn fit(x: &Matrix, y: &Target, max_depth: usize) -> Self {
        let idx: Vec<usize> = (0..x.rows()).collect();
        Self { root: grow(x, y, idx, max_depth) }
    }

    fn predict(&self, x: &Matrix, y: &Target) -> Prediction {
        let values = (0..x.rows()).map(|r| {
            let row = x.row(r);
            let mut node = &self.root;
            loop {
                match node {
                    Node::Leaf(v) => return *v,
                    Node::Split { feature, threshold, left, right } => {
                        node = if row[*feature] <= *threshold { left } else { right };
                    }
                }
            }
        });
        match y {
            Target::Classes { .. } => Prediction::Classes(values.map(|v| v as usize).collect()),
            Target::Values(_) => Prediction::Values(values.collect()),
        }
    }
}

fn grow(x: &Matrix, y: &Target, idx: Vec<usize>, depth: usize) -> Node {
    let mut all = Stats::empty(y);
    for &i in &idx {
        all.add(y, i, 1.0);
    }
    let parent = all.weighted_impurity();
    if depth == 0 || idx.len() < 2 || parent <= 1e-12 {
        return Node::Leaf(all.leaf_value());
    }
    let mut best: Option<(f64, usize, f64)> = None;
    let mut sorted = idx.clone();
    for f in 0..x.cols() {
        sorted.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
        let mut left = Stats::empty(y);
        let mut right = all.clone();
        for w in 0..sorted.len() - 1 {
            left.add(y, sorted[w], 1.0);
            right.add(y, sorted[w], -1.0);
            let (a, b) = (x.get(sorted[w], f), x.get(sorted[w + 1], f));
            if a == b {
                continue;
            }
            let gain = parent - left.weighted_impurity() - right.weighted_impurity();
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, 0.5 * (a + b)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return Node::Leaf(all.leaf_value());
    };
    let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x.get(i, feature) <= threshold);
    debug_assert!(!l.is_empty() && !r.is_empty() && all.n() > 0.0);
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(x, y, l, depth - 1)),
        right: Box::new(grow(x, y, r, depth - 1)),
    }
}

// ---- gradient-trained models ---------------------------------------------

fn one_hot(labels: &[usize], k: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), k);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l, 1.0);
    }
    m
}

/// Mean cross-entropy or mean squared error of `out` against the batch
/// target.
fn loss(g: &mut Graph, out: crate::numkit::Var, target: &Matrix, classes: bool) -> Result<crate::numkit::Var> {
    let n = target.rows() as f64;
    let t = g.constant(target.clone());
    if classes {
        let ls = g.log_softmax(out)?;
        let picked = g.mul(ls, t)?;
        let s = g.sum_all(picked)?;
        g.scale(s, -1.0 / n)
    } else {
        let d = g.sub(out, t)?;
        let d2 = g.square(d)?;
        let s = g.sum_all(d2)?;
        g.scale(s, 1.0 / n)
    }
}

/// Targets as a matrix plus the scale used for values.
fn target_matrix(y: &Target) -> (Matrix, bool, f64, f64) {
    match y {
        Target::Classes { labels, n_classes } => (one_hot(labels, *n_classes), true, 0.0, 1.0),
        Target::Values(v) => {
            let m = Matrix::from_vec(v.len(), 1, v.clone()).expect("column vector");
            let (mean, std) = column_stats(&m);
            (standardize(&m, &mean, &std), false, mean[0], std[0])
        }
    }
}

fn decode(out: &Matrix, classes: bool, mean: f64, std: f64) -> Prediction {
    if classes {
        Prediction::Classes((0..out.rows()).map(|r| argmax(out.row(r)).unwrap_or(0)).collect())
    } else {
        Prediction::Values(out.data().iter().map(|v| v * std + mean).collect())
    }
}

fn mlp(x: &Matrix, y: &Target, x_test: &Matrix, rng: &mut RngStream) -> Result<Prediction> {
    let (mu, sd) = column_stats(x);
    let xs = standardize(x, &mu, &sd);
    let (target, classes, tm, ts) = target_matrix(y);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, rng, "mlp.fc1", x.cols(), MLP_HIDDEN);
    let l2 = Linear::new(&mut store, rng, "mlp.fc2", MLP_HIDDEN, target.cols());
    let forward = |g: &mut Graph, b: &crate::numkit::Binding, xv| -> Result<crate::numkit::Var> {
        let h = l1.forward(g, b, xv)?;
        let h = g.relu(h)?;
        l2.forward(g, b, h)
    };
    let mut adam = Adam::new(MLP_LR, 0.9, 0.999);
    let ids = store.trainable_ids();
    let mut order: Vec<usize> = (0..xs.rows()).collect();
    for _ in 0..MLP_EPOCHS {
        rng.shuffle(&mut order);
        for chunk in order.chunks(MLP_BATCH) {
            store.zero_grads();
            let mut g = Graph::new();
            let b = store.bind(&mut g, true);
            let xv = g.constant(xs.select_rows(chunk));
            let out = forward(&mut g, &b, xv)?;
            let l = loss(&mut g, out, &target.select_rows(chunk), classes)?;
            store.backward_into(&g, l, &b)?;
            adam.step(&mut store, &ids)?;
        }
    }
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let xv = g.constant(standardize(x_test, &mu, &sd));
    let out = forward(&mut g, &b, xv)?;
    Ok(decode(g.value(out), classes, tm, ts))
}

fn logistic(x: &Matrix, y: &Target, x_test: &Matrix, rng: &mut RngStream) -> Result<Prediction> {
    let (mu, sd) = column_stats(x);
    let xs = standardize(x, &mu, &sd);
    let (target, classes, tm, ts) = target_matrix(y);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, rng, "logit", x.cols(), target.cols());
    lin.zero(&mut store);
    let mut adam = Adam::new(LOGISTIC_LR, 0.9, 0.999);
    let ids = store.trainable_ids();
    for _ in 0..LOGISTIC_STEPS {
        store.zero_grads();
        let mut g = Graph::new();
        let b = store.bind(&mut g, true);
        let xv = g.constant(xs.clone());
        let out = lin.forward(&mut g, &b, xv)?;
        let l = loss(&mut g, out, &target, classes)?;
        store.backward_into(&g, l, &b)?;
        adam.step(&mut store, &ids)?;
    }
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let xv = g.constant(standardize(x_test, &mu, &sd));
    let out = lin.forward(&mut g, &b, xv)?;
    Ok(decode(g.value(out), classes, tm, ts))
}

/// Ridge-stabilized least squares with an intercept, solved by Cholesky.
fn least_squares(x: &Matrix, y: &[f64], x_test: &Matrix) -> Result<Vec<f64>> {
    let (mu, sd) = column_stats(x);
    let with_bias = |m: &Matrix| {
        let s = standardize(m, &mu, &sd);
        Matrix::hcat(&[&s, &Matrix::filled(m.rows(), 1, 1.0)]).expect("same rows")
    };
    let a = with_bias(x);
    let mut ata = crate::numkit::matrix::gemm(&a, true, &a, false)?;
    let p = ata.rows();
    for i in 0..p - 1 {
        ata.set(i, i, ata.get(i, i) + RIDGE * x.rows() as f64);
    }
    let yv = Matrix::from_vec(y.len(), 1, y.to_vec())?;
    let aty = crate::numkit::matrix::gemm(&a, true, &yv, false)?;
    let beta = cholesky_solve(&ata, aty.data())?;
    let at = with_bias(x_test);
    Ok((0..at.rows()).map(|r| at.row(r).iter().zip(&beta).map(|(u, v)| u * v).sum()).collect())
}

fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if !(d > 0.0) {
                    return Err(Error::Solver("normal equations are not positive definite".into()));
                }
                l.set(i, j, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (b[i] - (0..i).map(|k| l.get(i, k) * z[k]).sum::<f64>()) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (z[i] - (i + 1..n).map(|k| l.get(k, i) * x[k]).sum::<f64>()) / l.get(i, i);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;

    fn separable(rng: &mut RngStream, n: usize) -> (Matrix, Vec<usize>) {
        let mut x = Matrix::zeros(n, 2);
        let mut y = Vec::new();
        for r in 0..n {
            let c = r % 2;
            let s = if c == 0 { -2.0 } else { 2.0 };
            x.set(r, 0, s + 0.3 * rng.normal());
            x.set(r, 1, rng.normal());
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn every_classifier_separates_two_blobs() {
        let mut rng = RngStream::new(1, Stream::Test);
        let (x, y) = separable(&mut rng, 200);
        let (xt, yt) = separable(&mut rng, 200);
        let target = Target::Classes { labels: y, n_classes: 2 };
        for kind in LearnerKind::ALL {
            let Prediction::Classes(p) = fit_predict(kind, &x, &target, &xt, &mut rng).unwrap() else { panic!() };
            let f1 = super::super::metrics::f1_binary(&yt, &p, 1).unwrap();
            assert!(f1 >= 0.95, "{kind:?}: {f1}");
        }
    }

    #[test]
    fn least_squares_recovers_a_plane() {
        let mut rng = RngStream::new(2, Stream::Test);
        let x = rng.normal_matrix(50, 2);
        let y: Vec<f64> = (0..50).map(|r| 3.0 * x.get(r, 0) - x.get(r, 1) + 0.5).collect();
        let Prediction::Values(p) = fit_predict(LearnerKind::Linear, &x, &Target::Values(y.clone()), &x, &mut rng).unwrap()
        else {
            panic!()
        };
        for (a, b) in p.iter().zip(&y) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn deep_tree_fits_training_set() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let y = Target::Classes { labels: vec![0, 1, 0, 1], n_classes: 2 };
        let mut rng = RngStream::new(0, Stream::Test);
        assert_eq!(fit_predict(LearnerKind::DecisionTree, &x, &y, &x, &mut rng).unwrap(), Prediction::Classes(vec![0, 1, 0, 1]));
    }

    #[test]
    fn regression_tree_predicts_leaf_means() {
        let x = Matrix::from_rows(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]]);
        let y = Target::Values(vec![1.0, 1.0, 3.0, 3.0]);
        let mut rng = RngStream::new(0, Stream::Test);
        let xt = Matrix::from_rows(&[vec![-1.0], vec![9.0]]);
        assert_eq!(fit_predict(LearnerKind::DecisionTree, &x, &y, &xt, &mut rng).unwrap(), Prediction::Values(vec![1.0, 3.0]));
    }
}
