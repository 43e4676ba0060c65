//! The conditional ODE generator, the trajectory-based discriminator, their
//! losses, the training loop and checkpoints.

mod checkpoint;
mod condvec;
pub mod discriminator;
pub mod generator;
mod losses;
mod train;

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use condvec::{sample_condvec, CondLayout, ConditionBatch};
pub use discriminator::{Discriminator, DiscriminatorField, DiscriminatorOutput};
pub use generator::{Generator, GeneratorField, GeneratorOutput, Sampling, G_FIELD_LAYERS};
pub use losses::{gradient_penalty, matching_loss, PenaltyMode};
pub use train::{EpochLog, TrainLog};

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::layers::{argmax, DROPOUT_RATE};
use crate::numkit::{ForwardCtx, Graph, Matrix, ParamStore, RngStream, Stream};
use crate::odeint::{SolverConfig, TimePoints};
use crate::preprocess::{Span, Transformer};
use crate::table::Table;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Time points frozen at `i/m`.
    Fixed,
    /// The discriminator scores `h(0)` only.
    OnlyG,
    /// The generator consumes `z ⊕ c` without its ODE.
    OnlyD,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "fixed" => Ok(Self::Fixed),
            "only_g" => Ok(Self::OnlyG),
            "only_d" => Ok(Self::OnlyD),
            other => Err(Error::Config(format!("unknown ablation {other:?}; expected full, fixed, only_g or only_d"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_t: f64,
    /// Gradient-penalty coefficient.
    pub gp_lambda: f64,
    pub batch_size: usize,
    /// Number of learned checkpoint times in the discriminator.
    pub m: usize,
    pub max_epoch: usize,
    /// Learning-rate decay factor.
    pub decay: f64,
    /// Epochs between decays.
    pub decay_period: usize,
    pub z_dim: usize,
    pub ablation: Ablation,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Upper bound on mixture modes per continuous column.
    pub max_modes: usize,
    /// Width of the discriminator trunk and ODE and of the generator's
    /// residual blocks.
    pub hidden: usize,
    pub gumbel_tau: f64,
    pub dropout: f64,
    /// Also learn the last checkpoint time instead of pinning it to 1.
    pub learn_last_time: bool,
    pub penalty: PenaltyMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 2e-4,
            lr_d: 2e-4,
            lr_t: 2e-4,
            gp_lambda: 10.0,
            batch_size: 500,
            m: 3,
            max_epoch: 300,
            decay: 0.97,
            decay_period: 2,
            z_dim: 128,
            ablation: Ablation::Full,
            seed: 0,
            solver: SolverConfig::training(),
            max_modes: 10,
            hidden: 256,
            gumbel_tau: 0.2,
            dropout: DROPOUT_RATE,
            learn_last_time: false,
            penalty: PenaltyMode::Exact,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("lr_t", self.lr_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.gp_lambda >= 0.0) {
            return bad(format!("gp_lambda must be non-negative, got {}", self.gp_lambda));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if self.z_dim == 0 || self.hidden == 0 || self.max_modes == 0 {
            return bad("z_dim, hidden and max_modes must be positive".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) || self.decay_period == 0 {
            return bad(format!("decay must be in (0, 1] and decay_period positive, got {} / {}", self.decay, self.decay_period));
        }
        if !(self.gumbel_tau > 0.0) {
            return bad(format!("gumbel_tau must be positive, got {}", self.gumbel_tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> Result<String> {
        crate::digest::json_digest(self)
    }
}

/// A generator, its discriminator and everything needed to decode samples.
#[derive(Clone, Debug)]
pub struct OctGan {
    pub config: TrainConfig,
    pub transformer: Transformer,
    pub layout: CondLayout,
    pub generator: Generator,
    pub g_store: ParamStore,
    pub discriminator: Discriminator,
    pub d_store: ParamStore,
    pub times: TimePoints,
}

impl OctGan {
    /// Freshly initialized networks for a fitted transformer.
    pub fn new(transformer: Transformer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let layout = CondLayout::new(&transformer.schema);
        let mut rng = RngStream::new(config.seed, Stream::Init);
        let mut g_store = ParamStore::new();
        let generator = Generator::new(
            &mut g_store,
            &mut rng,
            config.z_dim,
            layout.width,
            config.hidden,
            transformer.spans(),
            transformer.width(),
            config.gumbel_tau,
            config.ablation != Ablation::OnlyD,
        );
        let mut d_store = ParamStore::new();
        let discriminator = Discriminator::new(
            &mut d_store,
            &mut rng,
            transformer.width(),
            config.hidden,
            config.m,
            config.dropout,
            config.ablation != Ablation::OnlyG,
        );
        let times = match config.ablation {
            Ablation::Fixed => TimePoints::fixed(config.m)?,
            _ => TimePoints::uniform(config.m, config.learn_last_time)?,
        };
        Ok(Self { config, transformer, layout, generator, g_store, discriminator, d_store, times })
    }

    /// Fits the transformer on `table` and initializes the networks.
    pub fn fit_new(table: &Table, schema: &crate::preprocess::TableSchema, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed, Stream::Fit);
        let transformer = Transformer::fit(table, schema, config.max_modes, &mut rng)?;
        Self::new(transformer, config)
    }

    pub fn width(&self) -> usize {
        self.transformer.width()
    }

    /// Eval-mode generator pass on given noise and conditions. Returns the
    /// encoded rows and `z'`.
    pub fn generate_encoded(&self, z: &Matrix, c: &Matrix, sampling: Sampling<'_>) -> Result<(Matrix, Matrix)> {
        if z.cols() != self.config.z_dim || c.cols() != self.layout.width || z.rows() != c.rows() {
            return Err(Error::Shape(format!(
                "noise {:?} and condition {:?} for z_dim {} and condition width {}",
                z.shape(),
                c.shape(),
                self.config.z_dim,
                self.layout.width
            )));
        }
        let mut g = Graph::new();
        let b = self.g_store.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let cv = g.constant(c.clone());
        let mut ctx = ForwardCtx::eval();
        let out = self.generator.forward(&mut g, &b, zv, cv, &mut ctx, sampling, &self.config.solver)?;
        Ok((g.value(out.x).clone(), g.value(out.z_prime).clone()))
    }

    /// `n` synthetic rows; deterministic in `seed`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Table> {
        Ok(self.transformer.decode(&self.generate_rows(n, seed)?.0)?)
    }

    /// Encoded synthetic rows together with the conditions they were drawn
    /// under.
    pub fn generate_rows(&self, n: usize, seed: u64) -> Result<(Matrix, Vec<(usize, usize)>)> {
        let mut rng = RngStream::new(seed, Stream::Generate);
        let mut parts = Vec::new();
        let mut choices = Vec::with_capacity(n);
        let mut done = 0;
        while done < n {
            let k = (n - done).min(self.config.batch_size);
            let z = rng.normal_matrix(k, self.config.z_dim);
            let cond = sample_condvec(&self.layout, k, &mut rng);
            let (x, _) = self.generate_encoded(&z, &cond.c, Sampling::Gumbel(&mut rng))?;
            parts.push(x);
            choices.extend(cond.choices);
            done += k;
        }
        let data = if parts.is_empty() {
            Matrix::zeros(0, self.width())
        } else {
            Matrix::vcat(&parts.iter().collect::<Vec<_>>())?
        };
        Ok((data, choices))
    }

    /// Rows along `e·z1 + (1-e)·z2` for `e = 0, 1/steps, ..., 1` under a
    /// fixed condition row `c`, decoded without sampling noise.
    pub fn interpolate_encoded(&self, z1: &[f64], z2: &[f64], c: &[f64], steps: usize) -> Result<Matrix> {
        if steps == 0 {
            return Err(Error::InvalidArgument("interpolation needs at least one step".into()));
        }
        if z1.len() != self.config.z_dim || z2.len() != self.config.z_dim {
            return Err(Error::Shape(format!("noise vectors must have length {}", self.config.z_dim)));
        }
        let mut z = Matrix::zeros(steps + 1, self.config.z_dim);
        let mut cm = Matrix::zeros(steps + 1, c.len());
        for i in 0..=steps {
            let e = i as f64 / steps as f64;
            for (j, v) in z.row_mut(i).iter_mut().enumerate() {
                *v = e * z1[j] + (1.0 - e) * z2[j];
            }
            cm.row_mut(i).copy_from_slice(c);
        }
        Ok(self.generate_encoded(&z, &cm, Sampling::Argmax)?.0)
    }

    pub fn interpolate(&self, z1: &[f64], z2: &[f64], c: &[f64], steps: usize) -> Result<Table> {
        self.transformer.decode(&self.interpolate_encoded(z1, z2, c, steps)?)
    }

    /// Fraction of `n` generated rows whose conditioned discrete column
    /// takes the conditioned category. `None` without discrete columns.
    pub fn condition_accuracy(&self, n: usize, seed: u64) -> Result<Option<f64>> {
        if self.layout.is_empty() || n == 0 {
            return Ok(None);
        }
        let (x, choices) = self.generate_rows(n, seed)?;
        let discrete: Vec<(usize, usize)> = self
            .transformer
            .spans()
            .into_iter()
            .filter_map(|s| match s {
                Span::Discrete { start, len } => Some((start, len)),
                Span::Continuous { .. } => None,
            })
            .collect();
        let hits = choices
            .iter()
            .enumerate()
            .filter(|(r, (s, cat))| {
                let (start, len) = discrete[*s];
                argmax(&x.row(*r)[start..start + len]) == Some(*cat)
            })
            .count();
        Ok(Some(hits as f64 / n as f64))
    }

    /// Critic scores in eval mode.
    pub fn score(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.d_store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::eval();
        let out = self.discriminator.forward(&mut g, &b, xv, &self.times.with_origin(), &mut ctx, &self.config.solver)?;
        Ok(g.value(out.score).clone())
    }
}
