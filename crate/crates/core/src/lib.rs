//! Tabular data synthesis with a conditional GAN whose generator and
//! discriminator embed neural-ODE layers.
//!
//! Module map:
//!
//! * [`numkit`]: matrices, random streams, layers and the reverse-mode tape.
//! * [`odeint`]: Dormand–Prince and RK4 integration, checkpointed
//!   trajectories, adjoint sensitivities and time-point gradients.
//! * [`preprocess`]: mode-specific normalization of continuous columns and
//!   one-hot encoding of discrete ones.
//! * [`model`]: generator, trajectory-based discriminator, losses and the
//!   training loop.
//! * [`synthdata`]: Gaussian-mixture and Bayesian-network oracles.
//! * [`eval`]: likelihood fitness, ML efficacy and clustering protocols.
//! * [`cli`]: the command-line driver.

pub mod cli;
pub mod digest;
pub mod error;
pub mod eval;
pub mod numkit;
pub mod odeint;
pub mod model;
pub mod preprocess;
pub mod synthdata;
pub mod table;

pub use error::{Error, Result};
