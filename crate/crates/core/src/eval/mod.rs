//! Evaluation protocols: likelihood fitness against an oracle, machine
//! learning efficacy with built-in learners, and clustering quality.

pub mod cluster;
pub mod learners;
pub mod metrics;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};
use crate::preprocess::{ColumnKind, TableSchema};
use crate::synthdata::Oracle;
use crate::table::{parse_number, Table};

pub use cluster::{clustering_score, ClusteringReport, KMeans};
pub use learners::{fit_predict, LearnerKind, Prediction, Target};
pub use metrics::{f1_binary, macro_f1, r2, silhouette};

/// `Some(v)` for finite `v`.
fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    /// Mean log-likelihood of the synthetic rows under the true oracle;
    /// `None` when some row is impossible under it.
    pub pr_f_given_s: Option<f64>,
    /// Mean log-likelihood of the test rows under an oracle refitted on the
    /// synthetic rows.
    pub pr_test_given_s_prime: Option<f64>,
}

pub fn likelihood_fitness(synthetic: &Table, oracle: &Oracle, test: &Table, rng: &mut RngStream) -> Result<LikelihoodReport> {
    let pr_f = oracle.mean_loglik(synthetic)?;
    let refit = oracle.fit(synthetic, rng)?;
    let pr_t = refit.mean_loglik(test)?;
    Ok(LikelihoodReport { pr_f_given_s: finite(pr_f), pr_test_given_s_prime: finite(pr_t) })
}

/// Numeric features: raw continuous values and one-hot discrete columns,
/// skipping `exclude`.
pub fn feature_matrix(table: &Table, schema: &TableSchema, exclude: Option<usize>) -> Result<Matrix> {
    schema.check_header(table)?;
    let width: usize = schema
        .columns
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(_, c)| match &c.kind {
            ColumnKind::Continuous => 1,
            ColumnKind::Discrete { categories } => categories.len(),
        })
        .sum();
    let mut x = Matrix::zeros(table.len(), width);
    for (r, row) in table.rows.iter().enumerate() {
        let out = x.row_mut(r);
        let mut at = 0;
        for (j, col) in schema.columns.iter().enumerate() {
            if Some(j) == exclude {
                continue;
            }
            match &col.kind {
                ColumnKind::Continuous => {
                    out[at] = parse_number(&col.name, &row[j])?;
                    at += 1;
                }
                ColumnKind::Discrete { categories } => {
                    let k = categories.iter().position(|c| *c == row[j]).ok_or_else(|| Error::UnknownCategory {
                        column: col.name.clone(),
                        value: row[j].clone(),
                    })?;
                    out[at + k] = 1.0;
                    at += categories.len();
                }
            }
        }
    }
    Ok(x)
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// F1 of the label's second category.
    Binary,
    /// Macro-F1.
    Multiclass,
    /// R².
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficacyReport {
    pub label: String,
    pub task: Task,
    /// Per-learner score; `None` is "N/A", a synthetic table whose label
    /// takes a single class.
    pub scores: BTreeMap<String, Option<f64>>,
    pub best: Option<f64>,
}

fn target(table: &Table, schema: &TableSchema, label: usize) -> Result<Target> {
    let col = &schema.columns[label];
    match &col.kind {
        ColumnKind::Continuous => Ok(Target::Values(table.numeric_column(label)?)),
        ColumnKind::Discrete { categories } => {
            let labels = table
                .rows
                .iter()
                .map(|row| {
                    categories.iter().position(|c| *c == row[label]).ok_or_else(|| Error::UnknownCategory {
                        column: col.name.clone(),
                        value: row[label].clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Target::Classes { labels, n_classes: categories.len() })
        }
    }
}

/// Trains every built-in learner on `synthetic` and scores it on `test`.
pub fn ml_efficacy(synthetic: &Table, test: &Table, schema: &TableSchema, label: &str, rng: &mut RngStream) -> Result<EfficacyReport> {
    let li = schema
        .columns
        .iter()
        .position(|c| c.name == label)
        .ok_or_else(|| Error::Schema(format!("label column {label:?} is not in the schema")))?;
    let task = match &schema.columns[li].kind {
        ColumnKind::Continuous => Task::Regression,
        ColumnKind::Discrete { categories } if categories.len() == 2 => Task::Binary,
        ColumnKind::Discrete { .. } => Task::Multiclass,
    };
    if synthetic.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("efficacy needs non-empty synthetic and test tables".into()));
    }
    let x = feature_matrix(synthetic, schema, Some(li))?;
    let xt = feature_matrix(test, schema, Some(li))?;
    let y = target(synthetic, schema, li)?;
    let yt = target(test, schema, li)?;
    let collapsed = match &y {
        Target::Classes { labels, .. } => labels.iter().all(|&l| l == labels[0]),
        Target::Values(_) => false,
    };
    let mut scores = BTreeMap::new();
    for kind in LearnerKind::ALL {
        let score = if collapsed {
            None
        } else {
            let p = fit_predict(kind, &x, &y, &xt, rng)?;
            Some(match (&p, &yt, task) {
                (Prediction::Classes(p), Target::Classes { labels, .. }, Task::Binary) => f1_binary(labels, p, 1)?,
                (Prediction::Classes(p), Target::Classes { labels, .. }, _) => macro_f1(labels, p)?,
                (Prediction::Values(p), Target::Values(t), _) => r2(t, p)?,
                _ => unreachable!("prediction kind follows the target kind"),
            })
        };
        scores.insert(kind.name().to_string(), score);
    }
    let best = scores.values().flatten().copied().fold(None, |b: Option<f64>, s| Some(b.map_or(s, |b| b.max(s))));
    Ok(EfficacyReport { label: label.to_string(), task, scores, best })
}

/// Clustering protocol on features standardized with the training table's
/// statistics.
pub fn clustering(
    synthetic: &Table,
    train: &Table,
    test: &Table,
    schema: &TableSchema,
    classes: usize,
    rng: &mut RngStream,
) -> Result<ClusteringReport> {
    let xtr = feature_matrix(train, schema, None)?;
    let (mean, std) = learners::column_stats(&xtr);
    let f = learners::standardize(&feature_matrix(synthetic, schema, None)?, &mean, &std);
    let te = learners::standardize(&feature_matrix(test, schema, None)?, &mean, &std);
    let tr = learners::standardize(&xtr, &mean, &std);
    clustering_score(&rows_of(&f), &rows_of(&tr), &rows_of(&te), classes, rng)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub synthetic_rows: usize,
    pub train_rows: usize,
    pub test_rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub likelihood: Option<LikelihoodReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub efficacy: Option<EfficacyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clustering: Option<ClusteringReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Long-format `(column, step, value)` triples of an interpolation path,
/// one per cell, for heatmaps.
pub fn interpolation_plot_data(path: &Table) -> Table {
    let mut out = Table::new(vec!["column".into(), "step".into(), "value".into()]);
    for (step, row) in path.rows.iter().enumerate() {
        for (name, v) in path.header.iter().zip(row) {
            out.rows.push(vec![name.clone(), step.to_string(), v.clone()]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;
    use crate::preprocess::ColumnSpec;
    use crate::synthdata::GmmOracle;

    fn labelled(rng: &mut RngStream, n: usize, collapse: bool) -> Table {
        let mut t = Table::new(vec!["x".into(), "c".into()]);
        for r in 0..n {
            let c = if collapse { 0 } else { r % 2 };
            let x = if c == 0 { -3.0 } else { 3.0 } + rng.normal();
            t.rows.push(vec![x.to_string(), ["a", "b"][c].into()]);
        }
        t
    }

    fn schema() -> TableSchema {
        TableSchema::new(vec![ColumnSpec::continuous("x"), ColumnSpec::discrete("c", ["a", "b"])]).unwrap()
    }

    #[test]
    fn training_on_real_data_is_effective() {
        let mut rng = RngStream::new(3, Stream::Test);
        let tr = labelled(&mut rng, 200, false);
        let te = labelled(&mut rng, 200, false);
        let r = ml_efficacy(&tr, &te, &schema(), "c", &mut rng).unwrap();
        assert_eq!(r.task, Task::Binary);
        assert!(r.best.unwrap() >= 0.95);
    }

    #[test]
    fn single_class_synthetic_is_not_applicable() {
        let mut rng = RngStream::new(3, Stream::Test);
        let f = labelled(&mut rng, 50, true);
        let te = labelled(&mut rng, 50, false);
        let r = ml_efficacy(&f, &te, &schema(), "c", &mut rng).unwrap();
        assert!(r.scores.values().all(Option::is_none));
        assert_eq!(r.best, None);
    }

    #[test]
    fn collapsed_synthetic_data_loses_test_likelihood() {
        let oracle = Oracle::Gmm(GmmOracle::grid(5, 2.0, 0.05).unwrap());
        let mut rng = RngStream::new(8, Stream::Test);
        let test = oracle.sample(2000, &mut rng);
        let genuine = oracle.sample(2000, &mut rng);
        let mut point = Table::new(test.header.clone());
        for _ in 0..2000 {
            point.rows.push(vec!["0.5".into(), "-0.25".into()]);
        }
        let good = likelihood_fitness(&genuine, &oracle, &test, &mut rng).unwrap();
        let bad = likelihood_fitness(&point, &oracle, &test, &mut rng).unwrap();
        let truth = oracle.mean_loglik(&test).unwrap();
        assert!(good.pr_test_given_s_prime.unwrap() > truth - 0.5);
        assert!(bad.pr_test_given_s_prime.is_none_or(|v| v < truth - 2.0));
    }

    #[test]
    fn plot_data_has_one_triple_per_cell() {
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        t.rows.push(vec!["1".into(), "x".into()]);
        t.rows.push(vec!["2".into(), "y".into()]);
        let p = interpolation_plot_data(&t);
        assert_eq!(p.len(), 4);
        assert_eq!(p.rows[3], vec!["b".to_string(), "1".into(), "y".into()]);
    }
}
