//! Versioned JSON checkpoints. Floats round-trip exactly, so a reloaded
//! model generates bitwise the same rows for the same seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::ParamSnapshot;
use crate::odeint::TimePoints;
use crate::preprocess::Transformer;

use super::{OctGan, TrainConfig};

pub const CHECKPOINT_FORMAT: &str = "octgan-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config_hash: String,
    config: TrainConfig,
    transformer: Transformer,
    times: TimePoints,
    generator: Vec<ParamSnapshot>,
    discriminator: Vec<ParamSnapshot>,
}

impl OctGan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.checkpoint()?)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.checkpoint()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let ck = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ck)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash()?,
            config: self.config.clone(),
            transformer: self.transformer.clone(),
            times: self.times.clone(),
            generator: self.g_store.snapshot(),
            discriminator: self.d_store.snapshot(),
        })
    }

    fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint: format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.config.hash()? != ck.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        let transformer = Transformer::from_parts(ck.transformer.schema, ck.transformer.mixtures)?;
        let mut model = Self::new(transformer, ck.config)?;
        if ck.times.m() != model.times.m() {
            return Err(Error::Checkpoint(format!("{} time points for m = {}", ck.times.m(), model.times.m())));
        }
        model.times = ck.times;
        model.g_store.restore(&ck.generator)?;
        model.d_store.restore(&ck.discriminator)?;
        Ok(model)
    }
}
