//! Discrete Bayesian networks: JSON specs, ancestral sampling, exact joint
//! log-probability and Laplace-smoothed refits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;
use crate::preprocess::{ColumnSpec, TableSchema};
use crate::table::Table;

/// Tolerance on CPT row sums.
pub const CPT_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnNode {
    pub name: String,
    pub states: Vec<String>,
    #[serde(default)]
    pub parents: Vec<String>,
    /// One row per joint parent state, the first parent varying slowest.
    pub cpt: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnOracle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub nodes: Vec<BnNode>,
    /// Parent indices per node, derived on load.
    #[serde(skip)]
    parent_idx: Vec<Vec<usize>>,
    /// Topological order, derived on load.
    #[serde(skip)]
    order: Vec<usize>,
}

impl BnOracle {
    pub fn new(nodes: Vec<BnNode>) -> Result<Self> {
        let mut bn = Self { note: None, nodes, parent_idx: Vec::new(), order: Vec::new() };
        bn.index()?;
        Ok(bn)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut bn: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("network spec: {e}")))?;
        bn.index()?;
        Ok(bn)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn index(&mut self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::Config("network has no nodes".into()));
        }
        let pos = |name: &str| self.nodes.iter().position(|x| x.name == name);
        let mut parent_idx = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            if pos(&node.name) != Some(i) {
                return Err(Error::Config(format!("duplicate node {:?}", node.name)));
            }
            if node.states.len() < 2 {
                return Err(Error::Config(format!("node {:?} needs at least two states", node.name)));
            }
            let ps = node
                .parents
                .iter()
                .map(|p| pos(p).ok_or_else(|| Error::Config(format!("node {:?}: unknown parent {p:?}", node.name))))
                .collect::<Result<Vec<_>>>()?;
            parent_idx.push(ps);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let rows: usize = parent_idx[i].iter().map(|&p| self.nodes[p].states.len()).product();
            if node.cpt.len() != rows {
                return Err(Error::Config(format!("node {:?}: {} CPT rows, expected {rows}", node.name, node.cpt.len())));
            }
            for row in &node.cpt {
                if row.len() != node.states.len() || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Config(format!("node {:?}: malformed CPT row {row:?}", node.name)));
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > CPT_TOL {
                    return Err(Error::Config(format!("node {:?}: CPT row {row:?} does not sum to 1", node.name)));
                }
            }
        }
        // Kahn's algorithm; ties broken by declaration order.
        let mut indeg: Vec<usize> = parent_idx.iter().map(Vec::len).collect();
        let mut order = Vec::with_capacity(n);
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        while let Some(&i) = ready.first() {
            ready.remove(0);
            order.push(i);
            for (j, ps) in parent_idx.iter().enumerate() {
                for _ in ps.iter().filter(|&&p| p == i) {
                    indeg[j] -= 1;
                    if indeg[j] == 0 {
                        let at = ready.partition_point(|&r| r < j);
                        ready.insert(at, j);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::Config("network has a directed cycle".into()));
        }
        self.parent_idx = parent_idx;
        self.order = order;
        Ok(())
    }

    pub fn schema(&self) -> TableSchema {
        TableSchema {
            columns: self.nodes.iter().map(|n| ColumnSpec::discrete(n.name.clone(), n.states.iter().cloned())).collect(),
        }
    }

    fn row_index(&self, node: usize, state: &[usize]) -> usize {
        self.parent_idx[node].iter().fold(0, |acc, &p| acc * self.nodes[p].states.len() + state[p])
    }

    /// Ancestral sampling in topological order.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Table {
        let mut t = Table::new(self.nodes.iter().map(|x| x.name.clone()).collect());
        let mut state = vec![0; self.nodes.len()];
        for _ in 0..n {
            for &i in &self.order {
                let row = self.row_index(i, &state);
                state[i] = rng.categorical(&self.nodes[i].cpt[row]);
            }
            t.rows.push(state.iter().zip(&self.nodes).map(|(&s, node)| node.states[s].clone()).collect());
        }
        t
    }

    /// State indices per row, columns matched by name.
    pub fn states(&self, table: &Table) -> Result<Vec<Vec<usize>>> {
        let cols = self.nodes.iter().map(|n| table.column_index(&n.name)).collect::<Result<Vec<_>>>()?;
        table
            .rows
            .iter()
            .map(|row| {
                cols.iter()
                    .zip(&self.nodes)
                    .map(|(&c, node)| {
                        node.states.iter().position(|s| *s == row[c]).ok_or_else(|| Error::UnknownCategory {
                            column: node.name.clone(),
                            value: row[c].clone(),
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn log_prob(&self, state: &[usize]) -> f64 {
        (0..self.nodes.len()).map(|i| self.nodes[i].cpt[self.row_index(i, state)][state[i]].ln()).sum()
    }

    /// Mean joint log-probability per row; `-inf` when some row has zero
    /// probability.
    pub fn mean_loglik(&self, table: &Table) -> Result<f64> {
        if table.is_empty() {
            return Err(Error::InvalidArgument("log-likelihood of an empty table".into()));
        }
        let states = self.states(table)?;
        let total: f64 = states.iter().map(|s| self.log_prob(s)).sum();
        if total == f64::NEG_INFINITY {
            log::warn!("table contains rows with zero probability under the network");
        }
        Ok(total / states.len() as f64)
    }

    /// Same structure, CPTs re-estimated with add-one smoothing.
    pub fn fit(&self, table: &Table) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::InvalidArgument("cannot refit an oracle on an empty table".into()));
        }
        let states = self.states(table)?;
        let mut nodes = self.nodes.clone();
        for (i, node) in nodes.iter_mut().enumerate() {
            let mut counts = vec![vec![1.0; node.states.len()]; node.cpt.len()];
            for s in &states {
                counts[self.row_index(i, s)][s[i]] += 1.0;
            }
            for row in &mut counts {
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|c| *c /= total);
            }
            node.cpt = counts;
        }
        let mut bn = Self::new(nodes)?;
        bn.note.clone_from(&self.note);
        Ok(bn)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Stream;
    use approx::assert_abs_diff_eq;

    fn node(name: &str, parents: &[&str], cpt: Vec<Vec<f64>>) -> BnNode {
        BnNode {
            name: name.into(),
            states: vec!["0".into(), "1".into()],
            parents: parents.iter().map(|p| p.to_string()).collect(),
            cpt,
        }
    }

    #[test]
    fn uniform_chain_log_likelihood() {
        let bn = BnOracle::new(vec![
            node("a", &[], vec![vec![0.5, 0.5]]),
            node("b", &["a"], vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
        ])
        .unwrap();
        for s in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            assert_abs_diff_eq!(bn.log_prob(&s), -1.386294, epsilon = 1e-6);
        }
    }

    #[test]
    fn deterministic_edge_is_respected() {
        let bn = BnOracle::new(vec![
            node("b", &["a"], vec![vec![0.0, 1.0], vec![1.0, 0.0]]),
            node("a", &[], vec![vec![0.3, 0.7]]),
        ])
        .unwrap();
        let mut rng = RngStream::new(2, Stream::Test);
        let t = bn.sample(500, &mut rng);
        for row in &t.rows {
            assert_ne!(row[0], row[1]);
        }
    }

    #[test]
    fn cycles_and_bad_rows_are_rejected() {
        let cyc = BnOracle::new(vec![
            node("a", &["b"], vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
            node("b", &["a"], vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
        ]);
        assert!(matches!(cyc, Err(Error::Config(_))));
        let bad = BnOracle::new(vec![node("a", &[], vec![vec![0.5, 0.6]])]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let short = BnOracle::new(vec![node("a", &["a2"], vec![vec![0.5, 0.5]])]);
        assert!(short.is_err());
    }

    #[test]
    fn refit_on_one_repeated_row_is_strictly_inside() {
        let bn = BnOracle::new(vec![
            node("a", &[], vec![vec![0.5, 0.5]]),
            node("b", &["a"], vec![vec![0.9, 0.1], vec![0.2, 0.8]]),
        ])
        .unwrap();
        let mut t = Table::new(vec!["a".into(), "b".into()]);
        for _ in 0..50 {
            t.rows.push(vec!["1".into(), "0".into()]);
        }
        let fit = bn.fit(&t).unwrap();
        for node in &fit.nodes {
            for row in &node.cpt {
                assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
        assert_abs_diff_eq!(fit.nodes[0].cpt[0][1], 51.0 / 52.0, epsilon = 1e-15);
    }

    #[test]
    fn unknown_state_is_an_error() {
        let bn = BnOracle::new(vec![node("a", &[], vec![vec![0.5, 0.5]])]).unwrap();
        let mut t = Table::new(vec!["a".into()]);
        t.rows.push(vec!["2".into()]);
        assert!(matches!(bn.mean_loglik(&t), Err(Error::UnknownCategory { .. })));
    }

    #[test]
    fn zero_probability_row_gives_negative_infinity() {
        let bn = BnOracle::new(vec![node("a", &[], vec![vec![1.0, 0.0]])]).unwrap();
        let mut t = Table::new(vec!["a".into()]);
        t.rows.push(vec!["1".into()]);
        assert_eq!(bn.mean_loglik(&t).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn json_round_trip() {
        let bn = BnOracle::new(vec![node("a", &[], vec![vec![0.25, 0.75]])]).unwrap();
        let back = BnOracle::from_json(&bn.to_json().unwrap()).unwrap();
        assert_eq!(back, bn);
    }
}
