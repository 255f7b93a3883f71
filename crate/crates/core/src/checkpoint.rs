//! Versioned JSON checkpoints for every model kind.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::Tensor;
use crate::baselines::FlatVae;
use crate::config::RunConfig;
use crate::data::{Dataset, Schema};
use crate::dependency::{Element, HGaussian};
use crate::error::{Error, Result};
use crate::likelihood::LikelihoodHead;
use crate::model::{Discriminator, DiscriminatorConfig, Draw, ModelKind, TabularModel, VaemModel};
use crate::rng::Rng;

pub const FORMAT_VERSION: u32 = 1;

/// Any trained model, dispatching the shared operation surface.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Vaem(VaemModel),
    Flat(FlatVae),
}

impl AnyModel {
    fn inner(&self) -> &dyn TabularModel {
        match self {
            AnyModel::Vaem(m) => m,
            AnyModel::Flat(m) => m,
        }
    }

    pub fn train_discriminator(&mut self, data: &Dataset, config: &DiscriminatorConfig, seed: u64) -> Result<()> {
        match self {
            AnyModel::Vaem(m) => m.train_discriminator(data, config, seed),
            AnyModel::Flat(m) => m.train_discriminator(data, config, seed),
        }
    }

    /// Per-epoch training objective of the main stage.
    pub fn history(&self) -> &[f64] {
        match self {
            AnyModel::Vaem(m) => &m.meta.stage2_history,
            AnyModel::Flat(m) => &m.meta.history,
        }
    }
}

impl TabularModel for AnyModel {
    fn kind(&self) -> ModelKind {
        self.inner().kind()
    }

    fn schema(&self) -> &Schema {
        self.inner().schema()
    }

    fn latent(&self) -> usize {
        self.inner().latent()
    }

    fn head(&self, column: usize) -> LikelihoodHead {
        self.inner().head(column)
    }

    fn discriminator(&self) -> Option<&Discriminator> {
        self.inner().discriminator()
    }

    fn draw_latents(&self, x: &[f64], mask: &[bool], rng: &mut Rng) -> Result<Vec<f64>> {
        self.inner().draw_latents(x, mask, rng)
    }

    fn posterior(&self, x: &[f64], z: &[f64], mask: &[bool]) -> Result<HGaussian> {
        self.inner().posterior(x, z, mask)
    }

    fn partial_posterior(&self, rows: &[Vec<Element>]) -> Result<HGaussian> {
        self.inner().partial_posterior(rows)
    }

    fn decode_h(&self, h: &Tensor, rng: &mut Rng) -> Result<Vec<Draw>> {
        self.inner().decode_h(h, rng)
    }

    fn sample_prior_h(&self, n: usize, rng: &mut Rng) -> Tensor {
        self.inner().sample_prior_h(n, rng)
    }

    fn log_likelihood(&self, x: &[f64], mask: &[bool], samples: usize, rng: &mut Rng) -> Result<f64> {
        self.inner().log_likelihood(x, mask, samples, rng)
    }

    fn impute(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        self.inner().impute(x, mask)
    }

    fn target_latent(&self, x_phi: f64, z_phi: f64) -> f64 {
        self.inner().target_latent(x_phi, z_phi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Serialize)]
struct DocOut<'a> {
    format_version: u32,
    model_kind: ModelKind,
    config_hash: &'a str,
    config: &'a RunConfig,
    seed: u64,
    model: Value,
}

#[derive(Deserialize)]
struct DocIn {
    format_version: u32,
    model_kind: ModelKind,
    config_hash: String,
    config: RunConfig,
    seed: u64,
    model: Value,
}

impl Checkpoint {
    pub fn new(model: AnyModel, config: RunConfig, seed: u64) -> Result<Self> {
        let config_hash = config.hash()?;
        Ok(Checkpoint {
            model,
            config,
            config_hash,
            seed,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let model = match &self.model {
            AnyModel::Vaem(m) => serde_json::to_value(m)?,
            AnyModel::Flat(m) => serde_json::to_value(m)?,
        };
        Ok(serde_json::to_string(&DocOut {
            format_version: FORMAT_VERSION,
            model_kind: self.model.kind(),
            config_hash: &self.config_hash,
            config: &self.config,
            seed: self.seed,
            model,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DocIn = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let model = match doc.model_kind {
            ModelKind::Vaem => AnyModel::Vaem(serde_json::from_value(doc.model)?),
            kind => {
                let flat: FlatVae = serde_json::from_value(doc.model)?;
                if flat.variant.kind() != kind {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint declares {} but holds {}",
                        kind.name(),
                        flat.variant.kind().name()
                    )));
                }
                AnyModel::Flat(flat)
            }
        };
        Ok(Checkpoint {
            model,
            config: doc.config,
            config_hash: doc.config_hash,
            seed: doc.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
