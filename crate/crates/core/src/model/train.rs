//! Adversarial training: one critic step, one generator step and one
//! time-point step per mini-batch, with step-wise learning-rate decay.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Adam, ForwardCtx, Graph, Matrix, RngStream, Stream, Var};
use crate::odeint::{checkpoint_time_grads, OdeFunc};
use crate::table::Table;

use super::generator::Sampling;
use super::losses::{gradient_penalty, matching_loss};
use super::{sample_condvec, Ablation, OctGan};

/// Absolute loss beyond which training stops.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
const ADAM_BETA1: f64 = 0.5;
const ADAM_BETA2: f64 = 0.9;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean critic loss including the penalty.
    pub loss_d: f64,
    pub penalty: f64,
    pub loss_g: f64,
    pub loss_matching: f64,
    /// `t_1..t_m` at the end of the epoch.
    pub times: Vec<f64>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_t: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Set when the divergence detector stopped the run.
    pub diverged: Option<String>,
}

#[derive(Default)]
struct StepLosses {
    loss_d: f64,
    penalty: f64,
    loss_g: f64,
    loss_matching: f64,
}

struct Rngs {
    shuffle: RngStream,
    noise: RngStream,
    condition: RngStream,
    gumbel: RngStream,
    dropout: RngStream,
    mixing: RngStream,
}

struct Optimizers {
    g: Adam,
    d: Adam,
    lr_t: f64,
}

fn check(what: &str, v: f64, epoch: usize) -> Result<()> {
    if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { epoch, detail: format!("{what} = {v}") });
    }
    Ok(())
}

impl OctGan {
    /// Encodes `table` and trains for `config.max_epoch` epochs.
    pub fn train(&mut self, table: &Table) -> Result<TrainLog> {
        self.train_with(table, |_| {})
    }

    /// [`OctGan::train`] with a callback after every epoch.
    pub fn train_with(&mut self, table: &Table, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainLog> {
        let mut rng = RngStream::new(self.config.seed, Stream::Encode);
        let encoded = self.transformer.encode(table, &mut rng)?;
        self.train_encoded(&encoded.data, on_epoch)
    }

    /// Trains on already encoded rows.
    pub fn train_encoded(&mut self, data: &Matrix, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainLog> {
        if data.cols() != self.width() {
            return Err(Error::Shape(format!("encoded width {} for a model of width {}", data.cols(), self.width())));
        }
        let mut log = TrainLog::default();
        if self.config.max_epoch == 0 {
            return Ok(log);
        }
        if data.rows() < 2 {
            return Err(Error::InvalidArgument("training needs at least two rows".into()));
        }
        let seed = self.config.seed;
        let mut rngs = Rngs {
            shuffle: RngStream::new(seed, Stream::Shuffle),
            noise: RngStream::new(seed, Stream::Noise),
            condition: RngStream::new(seed, Stream::Condition),
            gumbel: RngStream::new(seed, Stream::Gumbel),
            dropout: RngStream::new(seed, Stream::Dropout),
            mixing: RngStream::new(seed, Stream::Mixing),
        };
        let mut opt = Optimizers {
            g: Adam::new(self.config.lr_g, ADAM_BETA1, ADAM_BETA2),
            d: Adam::new(self.config.lr_d, ADAM_BETA1, ADAM_BETA2),
            lr_t: self.config.lr_t,
        };
        let n = data.rows();
        let bs = self.config.batch_size.min(n);
        let steps = (n / bs).max(1);
        let mut order: Vec<usize> = (0..n).collect();

        for epoch in 1..=self.config.max_epoch {
            let start = Instant::now();
            rngs.shuffle.shuffle(&mut order);
            let mut sum = StepLosses::default();
            for step in 0..steps {
                let real = data.select_rows(&order[step * bs..(step + 1) * bs]);
                match self.train_step(&real, &mut rngs, &mut opt, epoch) {
                    Ok(l) => {
                        sum.loss_d += l.loss_d;
                        sum.penalty += l.penalty;
                        sum.loss_g += l.loss_g;
                        sum.loss_matching += l.loss_matching;
                    }
                    Err(e @ (Error::Diverged { .. } | Error::NonFinite(_))) => {
                        log::warn!("training stopped at epoch {epoch}: {e}");
                        log.diverged = Some(e.to_string());
                        return Ok(log);
                    }
                    Err(e) => return Err(e),
                }
            }
            if epoch % self.config.decay_period == 0 {
                opt.g.lr *= self.config.decay;
                opt.d.lr *= self.config.decay;
                opt.lr_t *= self.config.decay;
            }
            let k = steps as f64;
            let entry = EpochLog {
                epoch,
                loss_d: sum.loss_d / k,
                penalty: sum.penalty / k,
                loss_g: sum.loss_g / k,
                loss_matching: sum.loss_matching / k,
                times: self.times.times(),
                lr_g: opt.g.lr,
                lr_d: opt.d.lr,
                lr_t: opt.lr_t,
                seconds: start.elapsed().as_secs_f64(),
            };
            log::info!(
                "epoch {epoch}: loss_d {:.4} penalty {:.4} loss_g {:.4} matching {:.4} ({:.1}s)",
                entry.loss_d,
                entry.penalty,
                entry.loss_g,
                entry.loss_matching,
                entry.seconds
            );
            on_epoch(&entry);
            log.epochs.push(entry);
        }
        Ok(log)
    }

    /// Generator pass in train mode; returns the fake batch values.
    fn fake_batch(&mut self, rows: usize, rngs: &mut Rngs) -> Result<Matrix> {
        let z = rngs.noise.normal_matrix(rows, self.config.z_dim);
        let cond = sample_condvec(&self.layout, rows, &mut rngs.condition);
        let mut g = Graph::new();
        let b = self.g_store.bind(&mut g, false);
        let zv = g.constant(z);
        let cv = g.constant(cond.c);
        let mut ctx = ForwardCtx::train_no_dropout();
        let out = self.generator.forward(&mut g, &b, zv, cv, &mut ctx, Sampling::Gumbel(&mut rngs.gumbel), &self.config.solver)?;
        ctx.commit(&mut self.g_store);
        Ok(g.value(out.x).clone())
    }

    /// Accumulates `weight · sum D(x)` into the critic's gradients and
    /// returns `(weight · sum D(x), ∂/∂t_i)`.
    fn critic_pass(&mut self, x: &Matrix, weight: f64, times: &[f64], rngs: &mut Rngs) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.d_store.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::train(&mut rngs.dropout);
        let out = self.discriminator.forward(&mut g, &b, xv, times, &mut ctx, &self.config.solver)?;
        let total = g.sum_all(out.score)?;
        let loss = g.scale(total, weight)?;
        let value = g.value(loss).item();
        let m = times.len() - 1;
        let grad_t = if self.discriminator.use_trajectory && self.config.ablation != Ablation::Fixed {
            let ghx = self.d_store.backward_into_with(&g, loss, &b, &[out.hx])?.pop().expect("one extra gradient");
            let h = self.discriminator.hidden;
            let direct: Vec<Matrix> = (1..=m).map(|i| ghx.slice_cols(i * h, h)).collect();
            let fields = self.checkpoint_fields(&g, &out.states[1..], &times[1..])?;
            checkpoint_time_grads(&direct, &fields)?
        } else {
            self.d_store.backward_into(&g, loss, &b)?;
            vec![0.0; m]
        };
        ctx.commit(&mut self.d_store);
        Ok((value, grad_t))
    }

    /// `f(h(t_i), t_i)` for every checkpoint, with batch statistics and no
    /// running-statistics updates.
    fn checkpoint_fields(&self, src: &Graph, states: &[Var], times: &[f64]) -> Result<Vec<Matrix>> {
        let mut g = Graph::new();
        let b = self.d_store.bind(&mut g, false);
        let mut ctx = ForwardCtx::train_no_dropout().without_stat_updates();
        states
            .iter()
            .zip(times)
            .map(|(&s, &t)| {
                let h = g.constant(src.value(s).clone());
                let tv = g.scalar(t);
                let f = self.discriminator.field.eval(&mut g, &b, h, tv, &mut ctx)?;
                Ok(g.value(f).clone())
            })
            .collect()
    }

    fn train_step(&mut self, real: &Matrix, rngs: &mut Rngs, opt: &mut Optimizers, epoch: usize) -> Result<StepLosses> {
        let n = real.rows();
        let inv = 1.0 / n as f64;
        let times = self.times.with_origin();

        // Critic.
        let fake = self.fake_batch(n, rngs)?;
        self.d_store.zero_grads();
        let (d_fake, gt_fake) = self.critic_pass(&fake, inv, &times, rngs)?;
        let (d_real, gt_real) = self.critic_pass(real, -inv, &times, rngs)?;
        let mut xbar = fake.clone();
        for r in 0..n {
            let u = rngs.mixing.uniform();
            for (o, (&a, &b)) in xbar.row_mut(r).iter_mut().zip(real.row(r).iter().zip(fake.row(r))) {
                *o = u * a + (1.0 - u) * b;
            }
        }
        let penalty = gradient_penalty(
            &self.discriminator,
            &mut self.d_store,
            &xbar,
            &times,
            self.config.gp_lambda,
            &self.config.solver,
            self.config.penalty,
            true,
        )?;
        let loss_d = d_fake + d_real + penalty;
        check("critic loss", loss_d, epoch)?;
        let ids = self.d_store.trainable_ids();
        opt.d.step(&mut self.d_store, &ids)?;

        // Generator.
        let z = rngs.noise.normal_matrix(n, self.config.z_dim);
        let cond = sample_condvec(&self.layout, n, &mut rngs.condition);
        self.g_store.zero_grads();
        let mut g = Graph::new();
        let bg = self.g_store.bind(&mut g, true);
        let bd = self.d_store.bind(&mut g, false);
        let zv = g.constant(z);
        let cv = g.constant(cond.c.clone());
        let mut gctx = ForwardCtx::train_no_dropout();
        let out = self.generator.forward(&mut g, &bg, zv, cv, &mut gctx, Sampling::Gumbel(&mut rngs.gumbel), &self.config.solver)?;
        let mut dctx = ForwardCtx::train(&mut rngs.dropout);
        let scored = self.discriminator.forward(&mut g, &bd, out.x, &times, &mut dctx, &self.config.solver)?;
        let total = g.sum_all(scored.score)?;
        let loss_g = g.scale(total, -inv)?;
        let loss_g_value = g.value(loss_g).item();
        let (loss, matching) = match matching_loss(&mut g, out.log_soft, &cond.c)? {
            Some(mv) => (g.add(loss_g, mv)?, g.value(mv).item()),
            None => (loss_g, 0.0),
        };
        check("generator loss", loss_g_value, epoch)?;
        check("matching loss", matching, epoch)?;
        self.g_store.backward_into(&g, loss, &bg)?;
        drop(g);
        gctx.commit(&mut self.g_store);
        dctx.commit(&mut self.d_store);
        let ids = self.g_store.trainable_ids();
        opt.g.step(&mut self.g_store, &ids)?;

        // Time points, from the Wasserstein part of the critic loss.
        if matches!(self.config.ablation, Ablation::Full | Ablation::OnlyD) {
            let grad_t: Vec<f64> = gt_fake.iter().zip(&gt_real).map(|(a, b)| a + b).collect();
            self.times.sgd_step(&grad_t, opt.lr_t)?;
        }

        Ok(StepLosses { loss_d, penalty, loss_g: loss_g_value, loss_matching: matching })
    }
}
