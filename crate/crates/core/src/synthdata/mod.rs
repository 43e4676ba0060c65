//! Simulated-data oracles: planar Gaussian mixtures and discrete Bayesian
//! networks, each able to sample, score and refit.

mod bayes;
mod mixture;

pub use bayes::{BnNode, BnOracle, CPT_TOL};
pub use mixture::{fit_isotropic, log_sum_exp, GmmOracle, FIT_RESTARTS, FIT_SIGMA_FLOOR};

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;
use crate::preprocess::TableSchema;
use crate::table::Table;

/// Eight-node binary network with the Asia structure. Its probabilities
/// are illustrative placeholders.
pub const ASIA_SPEC: &str = include_str!("../../data/asia_bn.json");

pub const GRID_SIDE: usize = 5;
pub const GRID_SPACING: f64 = 2.0;
pub const RING_COMPONENTS: usize = 8;
pub const RING_RADIUS: f64 = 1.0;
pub const ORACLE_SIGMA: f64 = 0.05;

/// Oracle description as it appears in configs and on the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleSpec {
    Grid {
        #[serde(default = "default_grid_side")]
        side: usize,
        #[serde(default = "default_grid_spacing")]
        spacing: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Ring {
        #[serde(default = "default_ring_components")]
        components: usize,
        #[serde(default = "default_ring_radius")]
        radius: f64,
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Bn {
        path: PathBuf,
    },
}

fn default_grid_side() -> usize {
    GRID_SIDE
}
fn default_grid_spacing() -> f64 {
    GRID_SPACING
}
fn default_ring_components() -> usize {
    RING_COMPONENTS
}
fn default_ring_radius() -> f64 {
    RING_RADIUS
}
fn default_sigma() -> f64 {
    ORACLE_SIGMA
}

impl FromStr for OracleSpec {
    type Err = Error;

    /// `grid`, `ring` or `bn:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Self::Grid { side: GRID_SIDE, spacing: GRID_SPACING, sigma: ORACLE_SIGMA }),
            "ring" => Ok(Self::Ring { components: RING_COMPONENTS, radius: RING_RADIUS, sigma: ORACLE_SIGMA }),
            _ => match s.strip_prefix("bn:") {
                Some(p) if !p.is_empty() => Ok(Self::Bn { path: PathBuf::from(p) }),
                _ => Err(Error::Config(format!("unknown oracle {s:?}; expected grid, ring or bn:<path>"))),
            },
        }
    }
}

impl OracleSpec {
    pub fn build(&self) -> Result<Oracle> {
        match self {
            Self::Grid { side, spacing, sigma } => Ok(Oracle::Gmm(GmmOracle::grid(*side, *spacing, *sigma)?)),
            Self::Ring { components, radius, sigma } => Ok(Oracle::Gmm(GmmOracle::ring(*components, *radius, *sigma)?)),
            Self::Bn { path } => Ok(Oracle::Bn(BnOracle::load(path)?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Oracle {
    Gmm(GmmOracle),
    Bn(BnOracle),
}

impl Oracle {
    pub fn asia() -> Result<Self> {
        Ok(Self::Bn(BnOracle::from_json(ASIA_SPEC)?))
    }

    pub fn schema(&self) -> TableSchema {
        match self {
            Self::Gmm(g) => g.schema(),
            Self::Bn(b) => b.schema(),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Table {
        match self {
            Self::Gmm(g) => g.sample(n, rng),
            Self::Bn(b) => b.sample(n, rng),
        }
    }

    /// Mean log-likelihood in nats per row.
    pub fn mean_loglik(&self, table: &Table) -> Result<f64> {
        match self {
            Self::Gmm(g) => g.mean_loglik(table),
            Self::Bn(b) => b.mean_loglik(table),
        }
    }

    /// A fresh oracle of the same family and size fitted to `table`.
    pub fn fit(&self, table: &Table, rng: &mut RngStream) -> Result<Self> {
        match self {
            Self::Gmm(g) => Ok(Self::Gmm(g.fit(table, rng)?)),
            Self::Bn(b) => Ok(Self::Bn(b.fit(table)?)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_command_line_names() {
        assert!(matches!("grid".parse::<OracleSpec>().unwrap(), OracleSpec::Grid { side: 5, .. }));
        assert!(matches!("ring".parse::<OracleSpec>().unwrap(), OracleSpec::Ring { components: 8, .. }));
        assert_eq!("bn:x.json".parse::<OracleSpec>().unwrap(), OracleSpec::Bn { path: "x.json".into() });
        assert!("bn:".parse::<OracleSpec>().is_err());
        assert!("spiral".parse::<OracleSpec>().is_err());
    }

    #[test]
    fn config_form_fills_defaults() {
        let spec: OracleSpec = toml::from_str("kind = \"ring\"\nradius = 2.0").unwrap();
        assert_eq!(spec, OracleSpec::Ring { components: 8, radius: 2.0, sigma: 0.05 });
    }

    #[test]
    fn shipped_network_loads() {
        let Oracle::Bn(bn) = Oracle::asia().unwrap() else { panic!("expected a network") };
        assert_eq!(bn.nodes.len(), 8);
        assert!(bn.note.as_deref().unwrap_or("").contains("illustrative"));
    }
}
