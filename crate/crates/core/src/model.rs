//! The full two-stage model, the discriminator, and the operation surface
//! shared with the baselines.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Activation, Bound, Init, Mlp, ParamId, ParamSet, ParamSpec, Tape, Tensor, Var};
use crate::data::{Dataset, MissingnessSampler, Schema};
use crate::dependency::{DependencyConfig, DependencyVae, Element, HGaussian};
use crate::error::{Error, Result};
use crate::gaussian::{self, log_normal, log_normal_diag};
use crate::likelihood::{argmax, LikelihoodHead};
use crate::marginal::{MarginalConfig, MarginalVae};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vaem,
    Vae,
    VaeExtended,
    VaeBalanced,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Vaem, ModelKind::Vae, ModelKind::VaeExtended, ModelKind::VaeBalanced];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vaem => "vaem",
            ModelKind::Vae => "vae",
            ModelKind::VaeExtended => "vae_extended",
            ModelKind::VaeBalanced => "vae_balanced",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// One generated row: normalized values, marginal latents (empty for models
/// without them) and the `h` it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub h: Vec<f64>,
}

/// Predictive summary for the target, in normalized units (class index for
/// discrete targets).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPrediction {
    pub point: f64,
    pub mean: f64,
    pub variance: f64,
    pub probs: Option<Vec<f64>>,
    pub samples: usize,
}

pub trait TabularModel: Send + Sync {
    fn kind(&self) -> ModelKind;
    fn schema(&self) -> &Schema;
    fn latent(&self) -> usize;
    fn head(&self, column: usize) -> LikelihoodHead;
    fn discriminator(&self) -> Option<&Discriminator>;

    /// Marginal latents for every cell of `B` rows (zeros where unobserved);
    /// empty for models that work on `x` directly.
    fn draw_latents(&self, x: &[f64], mask: &[bool], rng: &mut Rng) -> Result<Vec<f64>>;

    /// `q(h | z_O, x_O)` for every row; `z` is ignored by models without latents.
    fn posterior(&self, x: &[f64], z: &[f64], mask: &[bool]) -> Result<HGaussian>;

    /// `q(h | ·)` for explicit element multisets, one row per set.
    fn partial_posterior(&self, rows: &[Vec<Element>]) -> Result<HGaussian>;

    /// The generative path from `h` (`B×L`) to rows. Both samplers end here.
    fn decode_h(&self, h: &Tensor, rng: &mut Rng) -> Result<Vec<Draw>>;

    fn sample_prior_h(&self, n: usize, rng: &mut Rng) -> Tensor;

    /// Importance-sampled `log p(x_S)` of one row, `S` the true cells of `mask`.
    fn log_likelihood(&self, x: &[f64], mask: &[bool], samples: usize, rng: &mut Rng) -> Result<f64>;

    /// Fills unobserved cells with the likelihood mode over posterior-mean latents.
    fn impute(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>>;

    /// Value used for the target's latent element when it enters `q(h | ·)`.
    fn target_latent(&self, _x_phi: f64, z_phi: f64) -> f64 {
        z_phi
    }

    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<Draw>> {
        let h = self.sample_prior_h(n, rng);
        self.decode_h(&h, rng)
    }

    /// `n` joint draws given `x_O`: latents of `O` from their encoders, `h`
    /// from the partial posterior, the rest from the decoders.
    fn conditional_sample(&self, x: &[f64], mask: &[bool], n: usize, rng: &mut Rng) -> Result<Vec<Draw>> {
        let d = self.schema().width();
        validate_row(self.schema(), x, mask)?;
        let xs: Vec<f64> = (0..n).flat_map(|_| x.iter().copied()).collect();
        let ms: Vec<bool> = (0..n).flat_map(|_| mask.iter().copied()).collect();
        let zs = self.draw_latents(&xs, &ms, rng)?;
        let post = self.posterior(&xs, &zs, &ms)?;
        let l = self.latent();
        let mut hv = Vec::with_capacity(n * l);
        for r in 0..n {
            hv.extend(post.sample(r, rng));
        }
        let mut draws = self.decode_h(&Tensor::matrix(n, l, hv)?, rng)?;
        for (r, draw) in draws.iter_mut().enumerate() {
            for c in 0..d {
                if mask[c] {
                    draw.x[c] = x[c];
                    if !zs.is_empty() {
                        draw.z[c] = zs[r * d + c];
                    }
                }
            }
        }
        Ok(draws)
    }
}

/// Checks that observed cells hold valid normalized values.
pub fn validate_row(schema: &Schema, x: &[f64], mask: &[bool]) -> Result<()> {
    let d = schema.width();
    if x.len() != d || mask.len() != d {
        return Err(Error::shape("row", &[&[x.len()], &[mask.len()], &[d]]));
    }
    for (c, spec) in schema.columns.iter().enumerate() {
        if !mask[c] {
            continue;
        }
        let v = x[c];
        let k = spec.cardinality();
        let ok = if k > 1 {
            v.fract() == 0.0 && v >= 0.0 && v < k as f64
        } else {
            v.is_finite()
        };
        if !ok {
            return Err(Error::InvalidObservation {
                field: spec.name.clone(),
                reason: format!("invalid normalized value {v}"),
            });
        }
    }
    Ok(())
}

/// Generation NLL per variable: `-Σ log p(x_O)` over rows divided by the
/// number of observed cells.
pub fn is_nll(model: &dyn TabularModel, data: &Dataset, samples: usize, seed: u64) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for r in 0..data.rows() {
        let mask = data.row_mask(r);
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let mut rng = rng::stream(seed, &[0x11, r as u64]);
        total -= model.log_likelihood(data.row(r), mask, samples, &mut rng)?;
        count += n;
    }
    if count == 0 {
        return Err(Error::NoObservedCells("test set".into()));
    }
    Ok(total / count as f64)
}

/// Conditional NLL per variable: `-Σ log p(x_U | x_O)` divided by the number
/// of scored cells `U = data.mask ∧ ¬observed`.
pub fn conditional_nll(
    model: &dyn TabularModel,
    data: &Dataset,
    observed: &[bool],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let d = data.width();
    if observed.len() != data.mask().len() {
        return Err(Error::shape("conditional_nll", &[&[observed.len()], &[data.mask().len()]]));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for r in 0..data.rows() {
        let base = data.row_mask(r);
        let obs: Vec<bool> = (0..d).map(|c| base[c] && observed[r * d + c]).collect();
        let scored = (0..d).filter(|&c| base[c] && !obs[c]).count();
        if scored == 0 {
            continue;
        }
        let mut rng = rng::stream(seed, &[0x12, r as u64]);
        let joint = model.log_likelihood(data.row(r), base, samples, &mut rng)?;
        let marg = model.log_likelihood(data.row(r), &obs, samples, &mut rng)?;
        total -= joint - marg;
        count += scored;
    }
    if count == 0 {
        return Err(Error::NoObservedCells("no unobserved cells to score".into()));
    }
    Ok(total / count as f64)
}

/// Target prediction: a Monte Carlo mixture of discriminator outputs over
/// conditional draws, or the drawn target values when there is no discriminator.
pub fn predict_target(
    model: &dyn TabularModel,
    x: &[f64],
    mask: &[bool],
    mc: usize,
    rng: &mut Rng,
) -> Result<TargetPrediction> {
    let t = model.schema().target();
    let mut m = mask.to_vec();
    m[t] = false;
    let n = mc.max(1);
    let draws = model.conditional_sample(x, &m, n, rng)?;
    let head = model.head(t);
    match model.discriminator() {
        Some(disc) => {
            let outs = disc.output_for(&draws)?;
            let w = outs.cols();
            let rows: Vec<&[f64]> = (0..n).map(|r| &outs.values()[r * w..(r + 1) * w]).collect();
            Ok(match head.classes() {
                Some(k) => {
                    let mut probs = vec![0.0; k];
                    for o in rows {
                        for (p, q) in probs.iter_mut().zip(disc.head.probs(o)) {
                            *p += q / n as f64;
                        }
                    }
                    discrete_summary(probs, n)
                }
                None => {
                    let var = match disc.head {
                        LikelihoodHead::Gaussian { variance } | LikelihoodHead::DiscreteGaussian { variance, .. } => variance,
                        _ => 0.0,
                    };
                    let mean = rows.iter().map(|o| o[0]).sum::<f64>() / n as f64;
                    let second = rows.iter().map(|o| var + o[0] * o[0]).sum::<f64>() / n as f64;
                    TargetPrediction {
                        point: mean,
                        mean,
                        variance: (second - mean * mean).max(0.0),
                        probs: None,
                        samples: n,
                    }
                }
            })
        }
        None => {
            let vals: Vec<f64> = draws.iter().map(|dr| dr.x[t]).collect();
            Ok(match head.classes() {
                Some(k) => {
                    let mut probs = vec![0.0; k];
                    for v in &vals {
                        probs[*v as usize] += 1.0 / n as f64;
                    }
                    discrete_summary(probs, n)
                }
                None => {
                    let mean = vals.iter().sum::<f64>() / n as f64;
                    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    TargetPrediction {
                        point: mean,
                        mean,
                        variance: var,
                        probs: None,
                        samples: n,
                    }
                }
            })
        }
    }
}

fn discrete_summary(probs: Vec<f64>, n: usize) -> TargetPrediction {
    let mean: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
    let second: f64 = probs.iter().enumerate().map(|(k, p)| (k * k) as f64 * p).sum();
    TargetPrediction {
        point: argmax(&probs) as f64,
        mean,
        variance: (second - mean * mean).max(0.0),
        probs: Some(probs),
        samples: n,
    }
}

// ---------------------------------------------------------------------------
// Discriminator

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            hidden: vec![100, 100],
            epochs: 200,
            batch_size: 100,
            lr: 1e-3,
        }
    }
}

/// `p_γ(x_Φ | x_O, x_{U∖Φ}, h)`: one slot per non-target feature plus `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub target: usize,
    pub head: LikelihoodHead,
    pub hidden: Vec<usize>,
    pub latent: usize,
    /// Multiplier turning each column's normalized value into its slot value.
    pub scale: Vec<f64>,
    pub params: ParamSet,
    net: Mlp,
}

#[derive(Serialize, Deserialize)]
struct DiscriminatorDoc {
    target: usize,
    head: LikelihoodHead,
    hidden: Vec<usize>,
    latent: usize,
    scale: Vec<f64>,
    params: Vec<ParamSpec>,
}

impl Serialize for Discriminator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DiscriminatorDoc {
            target: self.target,
            head: self.head.clone(),
            hidden: self.hidden.clone(),
            latent: self.latent,
            scale: self.scale.clone(),
            params: self.params.to_specs(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Discriminator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = DiscriminatorDoc::deserialize(d)?;
        if doc.target >= doc.scale.len() {
            return Err(serde::de::Error::custom("discriminator target out of range"));
        }
        let mut disc = Discriminator::build(
            doc.target,
            doc.head,
            doc.scale,
            doc.latent,
            &doc.hidden,
            Init::Zero,
            &mut rng::seeded(0),
        );
        disc.params.load_specs(&doc.params).map_err(serde::de::Error::custom)?;
        Ok(disc)
    }
}

/// Slot value of a discrete column: class index spread evenly over `[0, 1]`.
pub fn slot_scale(cardinality: usize) -> f64 {
    if cardinality > 1 {
        1.0 / (cardinality - 1) as f64
    } else {
        1.0
    }
}

impl Discriminator {
    pub fn new(schema: &Schema, head: LikelihoodHead, latent: usize, hidden: &[usize], init: Init, rng: &mut Rng) -> Self {
        let scale = schema.columns.iter().map(|c| slot_scale(c.cardinality())).collect();
        Self::build(schema.target(), head, scale, latent, hidden, init, rng)
    }

    fn build(
        target: usize,
        head: LikelihoodHead,
        scale: Vec<f64>,
        latent: usize,
        hidden: &[usize],
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let mut params = ParamSet::new();
        let mut sizes = vec![scale.len() - 1 + latent];
        sizes.extend(hidden);
        sizes.push(head.output_dim());
        let out = if head.is_gaussian() {
            Activation::Sigmoid
        } else {
            Activation::Identity
        };
        let net = Mlp::new(&mut params, "disc", &sizes, out, init, rng);
        Discriminator {
            target,
            head,
            hidden: hidden.to_vec(),
            latent,
            scale,
            params,
            net,
        }
    }

    pub fn input_width(&self) -> usize {
        self.net.input_dim()
    }

    /// Feature slots of complete rows (`B×D` in, `B×(D−1)` out).
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let d = self.scale.len();
        let mut out = Vec::with_capacity(x.len() / d * (d - 1));
        for row in x.chunks(d) {
            for (c, v) in row.iter().enumerate() {
                if c != self.target {
                    out.push(v * self.scale[c]);
                }
            }
        }
        out
    }

    /// The identity latent of the target value.
    pub fn identity(&self, x_phi: f64) -> f64 {
        x_phi * self.scale[self.target]
    }

    fn inputs(&self, x: &[f64], h: &[f64]) -> Result<Tensor> {
        let d = self.scale.len();
        let b = x.len() / d;
        let feats = self.features(x);
        let mut v = Vec::with_capacity(b * self.input_width());
        for r in 0..b {
            v.extend_from_slice(&feats[r * (d - 1)..(r + 1) * (d - 1)]);
            v.extend_from_slice(&h[r * self.latent..(r + 1) * self.latent]);
        }
        Tensor::matrix(b, self.input_width(), v)
    }

    /// Head outputs for complete rows `x` and latents `h`.
    pub fn output(&self, x: &[f64], h: &[f64]) -> Result<Tensor> {
        self.net.infer(&self.params, &self.inputs(x, h)?)
    }

    pub fn output_for(&self, draws: &[Draw]) -> Result<Tensor> {
        let x: Vec<f64> = draws.iter().flat_map(|d| d.x.iter().copied()).collect();
        let h: Vec<f64> = draws.iter().flat_map(|d| d.h.iter().copied()).collect();
        self.output(&x, &h)
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: &[f64], h: Var) -> Result<Var> {
        let d = self.scale.len();
        let b = x.len() / d;
        let feats = tape.constant(Tensor::matrix(b, d - 1, self.features(x))?);
        let input = tape.concat_cols(&[feats, h])?;
        self.net.forward(tape, bound, input)
    }
}

/// Tape access needed to train a discriminator against a model's encoder.
pub trait DiscriminatorHost: TabularModel {
    fn host_params(&self) -> &ParamSet;
    fn host_params_mut(&mut self) -> &mut ParamSet;
    /// Ids of the partial inference network (`λ`).
    fn encoder_ids(&self) -> Vec<ParamId>;
    /// Row-wise partial ELBO over the observed cells and the sampled `h`.
    #[allow(clippy::too_many_arguments)]
    fn elbo_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &[f64],
        z: &[f64],
        mask: &[bool],
        eps: &[f64],
        extra: Option<&[Vec<Element>]>,
    ) -> Result<(Var, Var)>;
    /// Elements describing an observed target when it is fed to the encoder.
    fn target_elements(&self, x_phi: f64, disc: &Discriminator) -> Vec<Element>;
    fn refresh(&mut self) -> Result<()>;
    fn install_discriminator(&mut self, disc: Discriminator);
}

/// Alternates (a) an encoder step on the target-augmented partial ELBO plus
/// the expected discriminator log-likelihood and (b) a discriminator step on
/// imputed inputs. Returns the per-epoch mean of `log p_γ(x_Φ | ·)` from (b).
pub fn train_discriminator<M: DiscriminatorHost>(
    model: &mut M,
    data: &Dataset,
    config: &DiscriminatorConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let schema = model.schema().clone();
    let d = schema.width();
    let t = schema.target();
    let rows: Vec<usize> = (0..data.rows()).filter(|&r| data.observed(r, t)).collect();
    if rows.is_empty() {
        return Err(Error::NoObservedCells(format!("target column '{}'", schema.columns[t].name)));
    }
    let l = model.latent();
    let mut rng = rng::stream(seed, &[0x5d]);
    let mut disc = Discriminator::new(&schema, model.head(t), l, &config.hidden, Init::Glorot, &mut rng);
    let enc_ids = model.encoder_ids();
    let mut adam_enc = AdamState::with_lr(model.host_params(), config.lr);
    let mut adam_disc = AdamState::with_lr(&disc.params, config.lr);
    let sampler = MissingnessSampler::new(rng::derive_seed(seed, &[0x5e]));
    let mut order = rows.clone();
    let bs = config.batch_size.max(1);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut mask = sampler.sample_epoch_mask(data.mask(), epoch as u64);
        for r in 0..data.rows() {
            mask[r * d + t] = false;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let b = chunk.len();
            let mut bx = Vec::with_capacity(b * d);
            let mut bm = Vec::with_capacity(b * d);
            for &r in chunk {
                bx.extend_from_slice(data.row(r));
                bm.extend_from_slice(&mask[r * d..(r + 1) * d]);
            }
            let xphi: Vec<f64> = chunk.iter().map(|&r| data.get(r, t)).collect();
            let bz = model.draw_latents(&bx, &bm, &mut rng)?;

            // (a) encoder update
            let eps = gaussian::std_normals(&mut rng, b * l);
            let extra: Vec<Vec<Element>> = xphi.iter().map(|&v| model.target_elements(v, &disc)).collect();
            let mut tape = Tape::new();
            let bound = tape.bind_where(model.host_params(), |id| enc_ids.contains(&id));
            let (elbo, h) = model.elbo_tape(&mut tape, &bound, &bx, &bz, &bm, &eps, Some(&extra))?;
            let hv = tape.value(h).clone();
            let draws = model.decode_h(&hv, &mut rng)?;
            let filled = fill(&bx, &bm, &draws, d);
            let dbound = tape.bind(&disc.params, false);
            let out = disc.forward(&mut tape, &dbound, &filled, h)?;
            let lp = disc.head.log_prob_rows(&mut tape, out, &xphi)?;
            let obj = tape.add(elbo, lp)?;
            let mean = tape.mean(obj)?;
            let loss = tape.neg(mean)?;
            tape.backward(loss, model.host_params_mut())?;
            adam_enc.step(model.host_params_mut())?;

            // (b) discriminator update
            let post = model.posterior(&bx, &bz, &bm)?;
            let mut hs = Vec::with_capacity(b * l);
            for r in 0..b {
                hs.extend(post.sample(r, &mut rng));
            }
            let hs = Tensor::matrix(b, l, hs)?;
            let draws = model.decode_h(&hs, &mut rng)?;
            let filled = fill(&bx, &bm, &draws, d);
            let mut tape = Tape::new();
            let dbound = tape.bind(&disc.params, true);
            let hvar = tape.constant(hs);
            let out = disc.forward(&mut tape, &dbound, &filled, hvar)?;
            let lp = disc.head.log_prob_rows(&mut tape, out, &xphi)?;
            let mean = tape.mean(lp)?;
            total += tape.value(mean).item() * b as f64;
            let loss = tape.neg(mean)?;
            tape.backward(loss, &mut disc.params)?;
            adam_disc.step(&mut disc.params)?;
        }
        model.refresh()?;
        history.push(total / rows.len() as f64);
    }
    model.install_discriminator(disc);
    Ok(history)
}

/// Observed cells from `x`, the rest from the draws.
fn fill(x: &[f64], mask: &[bool], draws: &[Draw], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for (r, draw) in draws.iter().enumerate() {
        for c in 0..d {
            let i = r * d + c;
            out.push(if mask[i] { x[i] } else { draw.x[c] });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// VAEM

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaemConfig {
    pub marginal: MarginalConfig,
    pub dependency: DependencyConfig,
    pub discriminator: DiscriminatorConfig,
    /// Fixed artificial-missingness rate; drawn per epoch when absent.
    pub missing_rate: Option<f64>,
}

impl VaemConfig {
    /// Narrow networks and short schedules for toy datasets of a few columns.
    pub fn compact() -> Self {
        VaemConfig {
            marginal: MarginalConfig {
                epochs: 300,
                hidden: 20,
                ..MarginalConfig::default()
            },
            dependency: DependencyConfig {
                latent: 4,
                embed: 4,
                features: 20,
                head_hidden: vec![50],
                decoder_hidden: vec![20],
                k_prior: 20,
                epochs: 300,
                ..DependencyConfig::default()
            },
            discriminator: DiscriminatorConfig {
                hidden: vec![20],
                epochs: 100,
                ..DiscriminatorConfig::default()
            },
            missing_rate: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub stage1_history: Vec<Vec<f64>>,
    pub stage2_history: Vec<f64>,
    pub discriminator_history: Vec<f64>,
    /// Combined ELBO on the training data with the stage-two model at its
    /// zero initialization, then after training, under the same noise.
    pub combined_elbo_zero_init: f64,
    pub combined_elbo_trained: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaemModel {
    pub schema: Schema,
    pub marginals: Vec<MarginalVae>,
    pub dependency: DependencyVae,
    pub discriminator: Option<Discriminator>,
    pub meta: TrainingMeta,
}

/// Class counts fed to the partial inference network (1 for continuous kinds).
pub fn cardinalities(schema: &Schema) -> Vec<usize> {
    schema.columns.iter().map(|c| c.cardinality()).collect()
}

impl VaemModel {
    /// Stage one on every column, then stage two on the frozen marginal
    /// posteriors.
    pub fn train_two_stage(data: &Dataset, config: &VaemConfig, seed: u64) -> Result<Self> {
        let schema = data.schema.clone();
        let d = schema.width();
        let variance = LikelihoodHead::noise_variance(schema.high_noise);
        let mut marginals = Vec::with_capacity(d);
        let mut stage1_history = Vec::with_capacity(d);
        for (c, spec) in schema.columns.iter().enumerate() {
            let values: Vec<f64> = (0..data.rows()).filter(|&r| data.observed(r, c)).map(|r| data.get(r, c)).collect();
            let head = LikelihoodHead::for_column(spec, variance);
            let fit = MarginalVae::train(head, &values, &config.marginal, &mut rng::stream(seed, &[1, c as u64]))
                .map_err(|e| match e {
                    Error::NoObservedCells(_) => Error::NoObservedCells(format!("column '{}'", spec.name)),
                    other => other,
                })?;
            log::info!("stage one: '{}' after {} epochs, elbo {:.4}", spec.name, fit.history.len(), fit.history.last().unwrap_or(&f64::NAN));
            marginals.push(fit.vae);
            stage1_history.push(fit.history);
        }
        let (z_mean, z_logvar) = encode_cells(&marginals, data)?;
        let cards = cardinalities(&schema);
        let mut rng2 = rng::stream(seed, &[2]);
        let mut dependency = DependencyVae::new(&cards, config.dependency.clone(), Init::Glorot, &mut rng2);
        dependency.choose_pseudo_inputs(data.cells(), &z_mean, data.mask(), &mut rng::stream(seed, &[4]))?;
        let sampler = match config.missing_rate {
            Some(rate) => MissingnessSampler::with_rate(rng::derive_seed(seed, &[3]), rate),
            None => MissingnessSampler::new(rng::derive_seed(seed, &[3])),
        };
        let mut model = VaemModel {
            schema,
            marginals,
            dependency,
            discriminator: None,
            meta: TrainingMeta {
                seed,
                stage1_history,
                ..TrainingMeta::default()
            },
        };
        let zero = model.zero_init_dependency();
        model.meta.combined_elbo_zero_init = zero.combined_elbo(data, seed)?;
        let history = model
            .dependency
            .train(data.cells(), &z_mean, &z_logvar, data.mask(), &sampler, &mut rng2)?;
        log::info!("stage two: elbo {:.4}", history.last().unwrap_or(&f64::NAN));
        model.meta.stage2_history = history;
        model.meta.combined_elbo_trained = model.combined_elbo(data, seed)?;
        Ok(model)
    }

    /// Copy of the model with stage two at its zero initialization, keeping
    /// the pseudo-input choice.
    pub fn zero_init_dependency(&self) -> VaemModel {
        let mut dep = DependencyVae::new(
            &cardinalities(&self.schema),
            self.dependency.config.clone(),
            Init::Zero,
            &mut rng::seeded(0),
        );
        dep.set_pseudo_inputs(self.dependency.pseudo_inputs().to_vec())
            .expect("pseudo-inputs already validated");
        VaemModel {
            schema: self.schema.clone(),
            marginals: self.marginals.clone(),
            dependency: dep,
            discriminator: None,
            meta: self.meta.clone(),
        }
    }

    /// Mean over rows of `Σ_{d∈O} [log p(x_d|z_d) − log q(z_d|x_d)]` plus the
    /// stage-two partial ELBO of the sampled `z_O`, one noise draw per row
    /// fixed by `seed`.
    pub fn combined_elbo(&self, data: &Dataset, seed: u64) -> Result<f64> {
        let d = self.schema.width();
        let n = data.rows();
        let l = self.dependency.latent();
        let mut rng = rng::stream(seed, &[6]);
        let eps_z = gaussian::std_normals(&mut rng, n * d);
        let eps_h = gaussian::std_normals(&mut rng, n * l);
        let (zm, zlv) = encode_cells(&self.marginals, data)?;
        let z: Vec<f64> = (0..n * d).map(|i| zm[i] + (0.5 * zlv[i]).exp() * eps_z[i]).collect();
        let mut stage1 = 0.0;
        for (c, m) in self.marginals.iter().enumerate() {
            let idx: Vec<usize> = (0..n).filter(|&r| data.observed(r, c)).map(|r| r * d + c).collect();
            if idx.is_empty() {
                continue;
            }
            let zs: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
            let out = m.decode_batch(&zs)?;
            let w = out.cols();
            for (j, &i) in idx.iter().enumerate() {
                stage1 += m.head.log_prob(&out.values()[j * w..(j + 1) * w], data.cells()[i])?;
                stage1 -= log_normal(z[i], zm[i], zlv[i]);
            }
        }
        let stage2: f64 = self.dependency.partial_elbo_rows(data.cells(), &z, data.mask(), &eps_h)?.iter().sum();
        Ok((stage1 + stage2) / n as f64)
    }

    pub fn train_discriminator(&mut self, data: &Dataset, config: &DiscriminatorConfig, seed: u64) -> Result<()> {
        if data.schema.columns != self.schema.columns {
            return Err(Error::Schema("dataset schema differs from the model".into()));
        }
        let history = train_discriminator(self, data, config, seed)?;
        self.meta.discriminator_history = history;
        Ok(())
    }

    fn encode_rows_z(&self, x: &[f64], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = self.schema.width();
        let b = mask.len() / d;
        let mut mean = vec![0.0; b * d];
        let mut logvar = vec![0.0; b * d];
        for (c, m) in self.marginals.iter().enumerate() {
            let idx: Vec<usize> = (0..b).map(|r| r * d + c).filter(|&i| mask[i]).collect();
            if idx.is_empty() {
                continue;
            }
            let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
            let (mu, lv) = m.encode_batch(&xs)?;
            for (j, &i) in idx.iter().enumerate() {
                mean[i] = mu[j];
                logvar[i] = lv[j];
            }
        }
        Ok((mean, logvar))
    }
}

/// Marginal posterior `(mean, logvar)` of every observed cell; zeros elsewhere.
fn encode_cells(marginals: &[MarginalVae], data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = data.width();
    let n = data.rows();
    let mut mean = vec![0.0; n * d];
    let mut logvar = vec![0.0; n * d];
    for (c, m) in marginals.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&r| data.observed(r, c)).collect();
        if rows.is_empty() {
            continue;
        }
        let (mu, lv) = m.encode_batch(&rows.iter().map(|&r| data.get(r, c)).collect::<Vec<_>>())?;
        for (j, &r) in rows.iter().enumerate() {
            mean[r * d + c] = mu[j];
            logvar[r * d + c] = lv[j];
        }
    }
    Ok((mean, logvar))
}

const IS_CHUNK: usize = 1000;

impl TabularModel for VaemModel {
    fn kind(&self) -> ModelKind {
        ModelKind::Vaem
    }

    fn schema(&self) -> &Schema {
        &self.schema
    }

    fn latent(&self) -> usize {
        self.dependency.latent()
    }

    fn head(&self, column: usize) -> LikelihoodHead {
        self.marginals[column].head.clone()
    }

    fn discriminator(&self) -> Option<&Discriminator> {
        self.discriminator.as_ref()
    }

    fn draw_latents(&self, x: &[f64], mask: &[bool], rng: &mut Rng) -> Result<Vec<f64>> {
        let (mean, logvar) = self.encode_rows_z(x, mask)?;
        Ok(mean
            .iter()
            .zip(&logvar)
            .zip(mask)
            .map(|((m, lv), &o)| if o { m + (0.5 * lv).exp() * gaussian::std_normal(rng) } else { 0.0 })
            .collect())
    }

    fn posterior(&self, x: &[f64], z: &[f64], mask: &[bool]) -> Result<HGaussian> {
        self.dependency.encode_rows(x, z, mask)
    }

    fn partial_posterior(&self, rows: &[Vec<Element>]) -> Result<HGaussian> {
        self.dependency.encode_set(&self.dependency.element_set(rows)?)
    }

    fn decode_h(&self, h: &Tensor, rng: &mut Rng) -> Result<Vec<Draw>> {
        let d = self.schema.width();
        let b = h.rows();
        let zg = self.dependency.decode_z(h)?;
        let mut z = vec![0.0; b * d];
        for r in 0..b {
            for c in 0..d {
                z[r * d + c] = zg.means.get(r, c) + (0.5 * zg.logvars.get(r, c)).exp() * gaussian::std_normal(rng);
            }
        }
        let mut x = vec![0.0; b * d];
        for (c, m) in self.marginals.iter().enumerate() {
            let zs: Vec<f64> = (0..b).map(|r| z[r * d + c]).collect();
            let out = m.decode_batch(&zs)?;
            let w = out.cols();
            for r in 0..b {
                x[r * d + c] = m.head.sample(&out.values()[r * w..(r + 1) * w], rng);
            }
        }
        Ok((0..b)
            .map(|r| Draw {
                x: x[r * d..(r + 1) * d].to_vec(),
                z: z[r * d..(r + 1) * d].to_vec(),
                h: h.row_slice(r).to_vec(),
            })
            .collect())
    }

    fn sample_prior_h(&self, n: usize, rng: &mut Rng) -> Tensor {
        let l = self.latent();
        let v: Vec<f64> = (0..n).flat_map(|_| self.dependency.sample_prior(rng)).collect();
        Tensor::matrix(n, l, v).expect("prior sample shape")
    }

    fn log_likelihood(&self, x: &[f64], mask: &[bool], samples: usize, rng: &mut Rng) -> Result<f64> {
        validate_row(&self.schema, x, mask)?;
        let d = self.schema.width();
        let l = self.latent();
        let obs: Vec<usize> = (0..d).filter(|&c| mask[c]).collect();
        if obs.is_empty() {
            return Ok(0.0);
        }
        let (zm, zlv) = self.encode_rows_z(x, mask)?;
        let q = self.dependency.encode_rows(x, &zm, mask)?;
        let (qm, qlv) = (q.mean(0).to_vec(), q.logvar(0).to_vec());
        let s = samples.max(1);
        let mut logw = Vec::with_capacity(s);
        let mut done = 0;
        while done < s {
            let k = IS_CHUNK.min(s - done);
            let mut hv = Vec::with_capacity(k * l);
            let mut lw = vec![0.0; k];
            for w in lw.iter_mut() {
                let h: Vec<f64> = (0..l).map(|j| qm[j] + (0.5 * qlv[j]).exp() * gaussian::std_normal(rng)).collect();
                *w = self.dependency.prior_log_prob(&h) - log_normal_diag(&h, &qm, &qlv);
                hv.extend(h);
            }
            let zg = self.dependency.decode_z(&Tensor::matrix(k, l, hv)?)?;
            for &c in &obs {
                let sd = (0.5 * zlv[c]).exp();
                let zs: Vec<f64> = (0..k).map(|_| zm[c] + sd * gaussian::std_normal(rng)).collect();
                let out = self.marginals[c].decode_batch(&zs)?;
                let wd = out.cols();
                let head = &self.marginals[c].head;
                for (r, w) in lw.iter_mut().enumerate() {
                    *w += head.log_prob_unchecked(&out.values()[r * wd..(r + 1) * wd], x[c])
                        + log_normal(zs[r], zg.means.get(r, c), zg.logvars.get(r, c))
                        - log_normal(zs[r], zm[c], zlv[c]);
                }
            }
            logw.extend(lw);
            done += k;
        }
        Ok(crate::autodiff::kernels::log_sum_exp(&logw) - (s as f64).ln())
    }

    fn impute(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        validate_row(&self.schema, x, mask)?;
        let (zm, _) = self.encode_rows_z(x, mask)?;
        let q = self.dependency.encode_rows(x, &zm, mask)?;
        let zg = self.dependency.decode_z(&q.means)?;
        let mut out = x.to_vec();
        for (c, m) in self.marginals.iter().enumerate() {
            if !mask[c] {
                out[c] = m.head.mode(&m.decode(zg.means.get(0, c))?);
            }
        }
        Ok(out)
    }

    fn target_latent(&self, x_phi: f64, z_phi: f64) -> f64 {
        match &self.discriminator {
            Some(disc) => disc.identity(x_phi),
            None => z_phi,
        }
    }
}

impl DiscriminatorHost for VaemModel {
    fn host_params(&self) -> &ParamSet {
        self.dependency.params()
    }

    fn host_params_mut(&mut self) -> &mut ParamSet {
        self.dependency.params_mut()
    }

    fn encoder_ids(&self) -> Vec<ParamId> {
        self.dependency.encoder().param_ids()
    }

    fn elbo_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &[f64],
        z: &[f64],
        mask: &[bool],
        eps: &[f64],
        extra: Option<&[Vec<Element>]>,
    ) -> Result<(Var, Var)> {
        self.dependency.partial_elbo_tape(tape, bound, x, z, mask, eps, extra)
    }

    fn target_elements(&self, x_phi: f64, disc: &Discriminator) -> Vec<Element> {
        let t = disc.target;
        vec![
            Element::X { feature: t, value: x_phi },
            Element::Z {
                feature: t,
                value: disc.identity(x_phi),
            },
        ]
    }

    fn refresh(&mut self) -> Result<()> {
        self.dependency.refresh_prior()
    }

    fn install_discriminator(&mut self, disc: Discriminator) {
        self.discriminator = Some(disc);
    }
}
