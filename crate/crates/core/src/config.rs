//! Run configuration shared by the command line, the suite runner and
//! checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{FlatConfig, FlatVae, FlatVariant};
use crate::checkpoint::AnyModel;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelKind, VaemConfig, VaemModel};

pub const FULL_STAGE1_EPOCHS: usize = 3000;
pub const FULL_STAGE2_EPOCHS: usize = 5000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub schema: PathBuf,
    pub model: ModelKind,
    /// Marginal VAEs (VAEM only).
    pub stage1_epochs: usize,
    /// Dependency network, or the whole model for the single-stage kinds.
    pub stage2_epochs: usize,
    /// 0 trains no discriminator.
    pub discriminator_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub k_prior: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub importance_samples: usize,
    /// Narrow networks for toy datasets.
    #[serde(default)]
    pub compact: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::new(),
            schema: PathBuf::new(),
            model: ModelKind::Vaem,
            stage1_epochs: 1000,
            stage2_epochs: 1000,
            discriminator_epochs: 0,
            batch_size: 100,
            learning_rate: 1e-3,
            k_prior: 50,
            seeds: vec![0],
            output_dir: PathBuf::from("out"),
            importance_samples: 10_000,
            compact: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn full_epochs(&mut self) {
        self.stage1_epochs = FULL_STAGE1_EPOCHS;
        self.stage2_epochs = FULL_STAGE2_EPOCHS;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("config: {m}")));
        if self.stage2_epochs == 0 || (self.model == ModelKind::Vaem && self.stage1_epochs == 0) {
            return bad("epoch counts must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.k_prior == 0 {
            return bad("k_prior must be positive");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.importance_samples == 0 {
            return bad("importance_samples must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn vaem_config(&self) -> VaemConfig {
        let mut c = if self.compact { VaemConfig::compact() } else { VaemConfig::default() };
        c.marginal.epochs = self.stage1_epochs;
        c.marginal.batch_size = self.batch_size;
        c.marginal.lr = self.learning_rate;
        c.dependency.epochs = self.stage2_epochs;
        c.dependency.batch_size = self.batch_size;
        c.dependency.lr = self.learning_rate;
        c.dependency.k_prior = self.k_prior;
        c.discriminator.epochs = self.discriminator_epochs;
        c.discriminator.batch_size = self.batch_size;
        c.discriminator.lr = self.learning_rate;
        c
    }

    pub fn flat_config(&self) -> FlatConfig {
        let mut c = FlatConfig::default();
        if self.compact {
            let v = VaemConfig::compact().dependency;
            c.latent = v.latent;
            c.embed = v.embed;
            c.features = v.features;
            c.head_hidden = v.head_hidden;
            c.decoder_hidden = v.decoder_hidden;
        }
        c.epochs = self.stage2_epochs;
        c.batch_size = self.batch_size;
        c.lr = self.learning_rate;
        c.k_prior = self.k_prior;
        c
    }
}

/// Trains the configured kind (and its discriminator when requested).
pub fn train_model(config: &RunConfig, data: &Dataset, seed: u64) -> Result<AnyModel> {
    config.validate()?;
    let vaem = config.vaem_config();
    let mut model = match FlatVariant::from_kind(config.model) {
        None => AnyModel::Vaem(VaemModel::train_two_stage(data, &vaem, seed)?),
        Some(variant) => AnyModel::Flat(FlatVae::train(data, variant, &config.flat_config(), seed)?),
    };
    if config.discriminator_epochs > 0 {
        model.train_discriminator(data, &vaem.discriminator, seed)?;
    }
    Ok(model)
}
