//! Single-stage comparison models: a partial VAE with a VampPrior over `x`
//! directly, its widened-latent variant, and a variant with per-type
//! likelihood weights.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, AdamState, Activation, Bound, Init, Mlp, ParamId, ParamSet, ParamSpec, Tape, Tensor, Var};
use crate::data::{Dataset, MissingnessSampler, Schema};
use crate::dependency::{mixture_log_prob, mixture_log_prob_tape, Element, HGaussian, PartialEncoder, PseudoInput};
use crate::error::{Error, Result};
use crate::gaussian::{self, log_normal_diag};
use crate::likelihood::LikelihoodHead;
use crate::model::{cardinalities, validate_row, Discriminator, DiscriminatorHost, Draw, ModelKind, TabularModel};
use crate::partial::concat_sets;
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatVariant {
    Plain,
    Extended,
    Balanced,
}

impl FlatVariant {
    pub fn kind(self) -> ModelKind {
        match self {
            FlatVariant::Plain => ModelKind::Vae,
            FlatVariant::Extended => ModelKind::VaeExtended,
            FlatVariant::Balanced => ModelKind::VaeBalanced,
        }
    }

    pub fn from_kind(kind: ModelKind) -> Option<Self> {
        match kind {
            ModelKind::Vae => Some(FlatVariant::Plain),
            ModelKind::VaeExtended => Some(FlatVariant::Extended),
            ModelKind::VaeBalanced => Some(FlatVariant::Balanced),
            ModelKind::Vaem => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatConfig {
    /// Base latent width; the extended variant adds the column count.
    pub latent: usize,
    pub embed: usize,
    pub features: usize,
    pub head_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub k_prior: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub missing_rate: Option<f64>,
}

impl Default for FlatConfig {
    fn default() -> Self {
        FlatConfig {
            latent: 20,
            embed: 10,
            features: 100,
            head_hidden: vec![500, 200],
            decoder_hidden: vec![50, 100],
            k_prior: 50,
            epochs: 1000,
            batch_size: 100,
            lr: 1e-3,
            missing_rate: None,
        }
    }
}

/// Likelihood family used to group columns for balancing.
pub fn type_key(head: &LikelihoodHead) -> &'static str {
    match head {
        LikelihoodHead::Gaussian { .. } | LikelihoodHead::DiscreteGaussian { .. } => "continuous",
        LikelihoodHead::Categorical { .. } => "categorical",
        LikelihoodHead::Ordinal { .. } => "ordinal",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceWeights {
    pub betas: Vec<f64>,
    /// True when the system had no same-sign solution and the previous
    /// weights were carried over.
    pub fallback: bool,
}

/// Solves `β_s L_s = β_t L_t` with `Σ β = 1`, i.e. `β_s ∝ 1 / L_s`. Falls
/// back to `previous` (uniform if none) when the sums are zero or differ in sign.
pub fn solve_balance_weights(sums: &[f64], previous: Option<&[f64]>) -> BalanceWeights {
    let n = sums.len();
    let same_sign = sums.iter().all(|&l| l < 0.0) || sums.iter().all(|&l| l > 0.0);
    if n == 0 || !same_sign || sums.iter().any(|l| !l.is_finite()) {
        log::warn!("balance weights: no same-sign solution for {sums:?}; keeping previous weights");
        let betas = match previous {
            Some(p) if p.len() == n => p.to_vec(),
            _ => vec![1.0 / n.max(1) as f64; n],
        };
        return BalanceWeights { betas, fallback: true };
    }
    let inv: Vec<f64> = sums.iter().map(|l| 1.0 / l).collect();
    let total: f64 = inv.iter().sum();
    BalanceWeights {
        betas: inv.iter().map(|v| v / total).collect(),
        fallback: false,
    }
}

/// Weights and per-type sums of the most recent balanced minibatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub types: Vec<String>,
    pub sums: Vec<f64>,
    pub weights: BalanceWeights,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlatMeta {
    pub seed: u64,
    pub history: Vec<f64>,
    pub discriminator_history: Vec<f64>,
    pub balance: Option<BalanceRecord>,
}

#[derive(Clone, Debug)]
pub struct FlatVae {
    pub variant: FlatVariant,
    pub config: FlatConfig,
    pub schema: Schema,
    pub heads: Vec<LikelihoodHead>,
    pub discriminator: Option<Discriminator>,
    pub meta: FlatMeta,
    params: ParamSet,
    encoder: PartialEncoder,
    decoder: Mlp,
    offsets: Vec<usize>,
    pseudo: Vec<PseudoInput>,
    prior_cache: Option<HGaussian>,
}

#[derive(Serialize, Deserialize)]
struct FlatDoc {
    variant: FlatVariant,
    config: FlatConfig,
    schema: Schema,
    pseudo_inputs: Vec<PseudoInput>,
    params: Vec<ParamSpec>,
    discriminator: Option<Discriminator>,
    meta: FlatMeta,
}

impl Serialize for FlatVae {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FlatDoc {
            variant: self.variant,
            config: self.config.clone(),
            schema: self.schema.clone(),
            pseudo_inputs: self.pseudo.clone(),
            params: self.params.to_specs(),
            discriminator: self.discriminator.clone(),
            meta: self.meta.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FlatVae {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = FlatDoc::deserialize(d)?;
        let mut vae = FlatVae::new(doc.schema, doc.variant, doc.config, Init::Zero, &mut rng::seeded(0));
        vae.params.load_specs(&doc.params).map_err(serde::de::Error::custom)?;
        vae.set_pseudo_inputs(doc.pseudo_inputs).map_err(serde::de::Error::custom)?;
        vae.discriminator = doc.discriminator;
        vae.meta = doc.meta;
        Ok(vae)
    }
}

impl PartialEq for FlatVae {
    fn eq(&self, other: &Self) -> bool {
        self.variant == other.variant
            && self.config == other.config
            && self.schema == other.schema
            && self.params == other.params
            && self.pseudo == other.pseudo
            && self.discriminator == other.discriminator
            && self.meta == other.meta
    }
}

impl FlatVae {
    pub fn new(schema: Schema, variant: FlatVariant, config: FlatConfig, init: Init, rng: &mut Rng) -> Self {
        let variance = LikelihoodHead::noise_variance(schema.high_noise);
        let heads: Vec<LikelihoodHead> = schema.columns.iter().map(|c| LikelihoodHead::for_column(c, variance)).collect();
        let latent = match variant {
            FlatVariant::Extended => config.latent + schema.width(),
            _ => config.latent,
        };
        let mut params = ParamSet::new();
        let encoder = PartialEncoder::new(
            &mut params,
            &cardinalities(&schema),
            false,
            config.embed,
            config.features,
            &config.head_hidden,
            latent,
            init,
            rng,
        );
        let mut offsets = vec![0];
        for h in &heads {
            offsets.push(offsets.last().unwrap() + h.output_dim());
        }
        let mut sizes = vec![latent];
        sizes.extend(&config.decoder_hidden);
        sizes.push(*offsets.last().unwrap());
        let decoder = Mlp::new(&mut params, "decoder", &sizes, Activation::Identity, init, rng);
        FlatVae {
            variant,
            config,
            schema,
            heads,
            discriminator: None,
            meta: FlatMeta::default(),
            params,
            encoder,
            decoder,
            offsets,
            pseudo: Vec::new(),
            prior_cache: None,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn latent_width(&self) -> usize {
        self.encoder.latent()
    }

    pub fn pseudo_inputs(&self) -> &[PseudoInput] {
        &self.pseudo
    }

    pub fn set_pseudo_inputs(&mut self, pseudo: Vec<PseudoInput>) -> Result<()> {
        let d = self.schema.width();
        if pseudo.iter().any(|p| p.x.len() != d || p.mask.len() != d) {
            return Err(Error::InvalidArgument("pseudo-input width differs from model".into()));
        }
        self.pseudo = pseudo;
        self.refresh_prior()
    }

    pub fn refresh_prior(&mut self) -> Result<()> {
        self.prior_cache = if self.pseudo.is_empty() {
            None
        } else {
            Some(self.encoder.encode(&self.params, &self.pseudo_set()?)?)
        };
        Ok(())
    }

    fn pseudo_set(&self) -> Result<crate::autodiff::SetBatch> {
        let x: Vec<f64> = self.pseudo.iter().flat_map(|p| p.x.iter().copied()).collect();
        let m: Vec<bool> = self.pseudo.iter().flat_map(|p| p.mask.iter().copied()).collect();
        self.encoder.row_set(&x, None, &m)
    }

    pub fn prior_log_prob(&self, h: &[f64]) -> f64 {
        match &self.prior_cache {
            None => log_normal_diag(h, &vec![0.0; h.len()], &vec![0.0; h.len()]),
            Some(c) => mixture_log_prob(h, c),
        }
    }

    /// Head outputs (`B×ΣW`) with Gaussian slices squashed to `[0, 1]`.
    pub fn decode(&self, h: &Tensor) -> Result<Tensor> {
        let mut out = self.decoder.infer(&self.params, h)?;
        let w = *self.offsets.last().unwrap();
        let rows = out.rows();
        let vals = out.values_mut();
        for (c, head) in self.heads.iter().enumerate() {
            if head.is_gaussian() {
                for r in 0..rows {
                    let v = &mut vals[r * w + self.offsets[c]];
                    *v = kernels::sigmoid(*v);
                }
            }
        }
        Ok(out)
    }

    fn head_slice<'a>(&self, out: &'a Tensor, r: usize, c: usize) -> &'a [f64] {
        &out.row_slice(r)[self.offsets[c]..self.offsets[c + 1]]
    }

    /// Per-type masked log-likelihood sums, each `B×1`, in `types` order.
    fn rec_by_type(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        x: &[f64],
        mask: &[bool],
    ) -> Result<Vec<(&'static str, Var)>> {
        let d = self.schema.width();
        let b = mask.len() / d;
        let out = self.decoder.forward(tape, bound, h)?;
        let mut groups: Vec<(&'static str, Var)> = Vec::new();
        for (c, head) in self.heads.iter().enumerate() {
            let mut slice = tape.slice_cols(out, self.offsets[c], self.offsets[c + 1])?;
            if head.is_gaussian() {
                slice = tape.sigmoid(slice)?;
            }
            let xs: Vec<f64> = (0..b)
                .map(|r| if mask[r * d + c] { x[r * d + c] } else { 0.0 })
                .collect();
            let lp = head.log_prob_rows(tape, slice, &xs)?;
            let m = tape.constant(Tensor::column(
                (0..b).map(|r| if mask[r * d + c] { 1.0 } else { 0.0 }).collect(),
            ));
            let masked = tape.mul(lp, m)?;
            let key = type_key(head);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some(g) => g.1 = tape.add(g.1, masked)?,
                None => groups.push((key, masked)),
            }
        }
        Ok(groups)
    }

    /// Row-wise ELBO and sampled `h`; `betas` weights the per-type terms.
    #[allow(clippy::too_many_arguments)]
    fn elbo_tape_weighted(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &[f64],
        mask: &[bool],
        eps: &[f64],
        extra: Option<&[Vec<Element>]>,
        balance: Option<&mut Option<BalanceRecord>>,
    ) -> Result<(Var, Var)> {
        let d = self.schema.width();
        let b = mask.len() / d;
        let l = self.latent_width();
        let mut set = self.encoder.row_set(x, None, mask)?;
        if let Some(extra) = extra {
            for j in 0..extra.iter().map(Vec::len).max().unwrap_or(0) {
                let col: Vec<Element> = extra.iter().map(|e| e[j]).collect();
                set = self.encoder.append(&set, &col)?;
            }
        }
        let n_pseudo = self.pseudo.len();
        let full = if n_pseudo > 0 {
            concat_sets(&set, &self.pseudo_set()?)
        } else {
            set
        };
        let (mean_all, lv_all) = self.encoder.encode_tape(tape, bound, full)?;
        let (mean, lv) = if n_pseudo > 0 {
            (tape.slice_rows(mean_all, 0, b)?, tape.slice_rows(lv_all, 0, b)?)
        } else {
            (mean_all, lv_all)
        };
        let e = tape.constant(Tensor::matrix(b, l, eps.to_vec())?);
        let h = gaussian::reparam(tape, mean, lv, e)?;
        let groups = self.rec_by_type(tape, bound, h, x, mask)?;
        let rec = match balance {
            Some(record) => {
                let sums: Vec<f64> = groups.iter().map(|(_, v)| tape.value(*v).values().iter().sum()).collect();
                let types: Vec<String> = groups.iter().map(|(k, _)| k.to_string()).collect();
                let previous = record
                    .as_ref()
                    .filter(|r| r.types == types)
                    .map(|r| r.weights.betas.clone());
                let weights = solve_balance_weights(&sums, previous.as_deref());
                let mut acc: Option<Var> = None;
                for ((_, v), beta) in groups.iter().zip(&weights.betas) {
                    let s = tape.scale(*v, *beta)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, s)?,
                        None => s,
                    });
                }
                *record = Some(BalanceRecord { types, sums, weights });
                acc.expect("at least one column")
            }
            None => {
                let mut acc = groups[0].1;
                for (_, v) in &groups[1..] {
                    acc = tape.add(acc, *v)?;
                }
                acc
            }
        };
        let log_prior = if n_pseudo > 0 {
            let pm = tape.slice_rows(mean_all, b, b + n_pseudo)?;
            let plv = tape.slice_rows(lv_all, b, b + n_pseudo)?;
            mixture_log_prob_tape(tape, h, pm, plv)?
        } else {
            let zero = tape.constant(Tensor::zeros(1, l));
            let zm = tape.constant(Tensor::zeros(b, l));
            gaussian::log_normal_rows(tape, h, zm, zero)?
        };
        let log_q = gaussian::log_q_reparam_rows(tape, lv, eps, b)?;
        let a = tape.add(rec, log_prior)?;
        Ok((tape.sub(a, log_q)?, h))
    }

    pub fn train(data: &Dataset, variant: FlatVariant, config: &FlatConfig, seed: u64) -> Result<Self> {
        let schema = data.schema.clone();
        let d = schema.width();
        let n = data.rows();
        if n == 0 {
            return Err(Error::NoObservedCells("training set".into()));
        }
        let mut rng = rng::stream(seed, &[0x21]);
        let mut vae = FlatVae::new(schema, variant, config.clone(), Init::Glorot, &mut rng);
        vae.meta.seed = seed;
        let k = crate::dependency::DependencyVae::prior_size(config.k_prior, n);
        let mut rows: Vec<usize> = index::sample(&mut rng::stream(seed, &[0x22]), n, k).into_vec();
        rows.sort_unstable();
        let pseudo = rows
            .into_iter()
            .map(|r| PseudoInput {
                row: r,
                x: data.row(r).to_vec(),
                z: Vec::new(),
                mask: data.row_mask(r).to_vec(),
            })
            .collect();
        vae.set_pseudo_inputs(pseudo)?;
        let sampler = match config.missing_rate {
            Some(rate) => MissingnessSampler::with_rate(rng::derive_seed(seed, &[0x23]), rate),
            None => MissingnessSampler::new(rng::derive_seed(seed, &[0x23])),
        };
        let l = vae.latent_width();
        let mut adam = AdamState::with_lr(&vae.params, config.lr);
        let mut order: Vec<usize> = (0..n).collect();
        let bs = config.batch_size.max(1);
        let mut record: Option<BalanceRecord> = None;
        for epoch in 0..config.epochs {
            let mask = sampler.sample_epoch_mask(data.mask(), epoch as u64);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(bs) {
                let mut bx = Vec::with_capacity(chunk.len() * d);
                let mut bm = Vec::with_capacity(chunk.len() * d);
                for &r in chunk {
                    bx.extend_from_slice(data.row(r));
                    bm.extend_from_slice(&mask[r * d..(r + 1) * d]);
                }
                let eps = gaussian::std_normals(&mut rng, chunk.len() * l);
                let mut tape = Tape::new();
                let bound = tape.bind(&vae.params, true);
                let balance = (variant == FlatVariant::Balanced).then_some(&mut record);
                let (elbo, _) = vae.elbo_tape_weighted(&mut tape, &bound, &bx, &bm, &eps, None, balance)?;
                let mean = tape.mean(elbo)?;
                total += tape.value(mean).item() * chunk.len() as f64;
                let loss = tape.neg(mean)?;
                tape.backward(loss, &mut vae.params)?;
                adam.step(&mut vae.params)?;
            }
            vae.meta.history.push(total / n as f64);
        }
        vae.meta.balance = record;
        vae.refresh_prior()?;
        Ok(vae)
    }

    pub fn train_discriminator(&mut self, data: &Dataset, config: &crate::model::DiscriminatorConfig, seed: u64) -> Result<()> {
        if data.schema.columns != self.schema.columns {
            return Err(Error::Schema("dataset schema differs from the model".into()));
        }
        let history = crate::model::train_discriminator(self, data, config, seed)?;
        self.meta.discriminator_history = history;
        Ok(())
    }
}

impl TabularModel for FlatVae {
    fn kind(&self) -> ModelKind {
        self.variant.kind()
    }

    fn schema(&self) -> &Schema {
        &self.schema
    }

    fn latent(&self) -> usize {
        self.latent_width()
    }

    fn head(&self, column: usize) -> LikelihoodHead {
        self.heads[column].clone()
    }

    fn discriminator(&self) -> Option<&Discriminator> {
        self.discriminator.as_ref()
    }

    fn draw_latents(&self, _x: &[f64], _mask: &[bool], _rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn posterior(&self, x: &[f64], _z: &[f64], mask: &[bool]) -> Result<HGaussian> {
        self.encoder.encode(&self.params, &self.encoder.row_set(x, None, mask)?)
    }

    fn partial_posterior(&self, rows: &[Vec<Element>]) -> Result<HGaussian> {
        self.encoder.encode(&self.params, &self.encoder.element_set(rows)?)
    }

    fn decode_h(&self, h: &Tensor, rng: &mut Rng) -> Result<Vec<Draw>> {
        let out = self.decode(h)?;
        Ok((0..h.rows())
            .map(|r| Draw {
                x: (0..self.heads.len())
                    .map(|c| self.heads[c].sample(self.head_slice(&out, r, c), rng))
                    .collect(),
                z: Vec::new(),
                h: h.row_slice(r).to_vec(),
            })
            .collect())
    }

    fn sample_prior_h(&self, n: usize, rng: &mut Rng) -> Tensor {
        let l = self.latent_width();
        let mut v = Vec::with_capacity(n * l);
        for _ in 0..n {
            match &self.prior_cache {
                None => v.extend(gaussian::std_normals(rng, l)),
                Some(c) => {
                    let k = rand::Rng::random_range(rng, 0..c.rows());
                    v.extend(c.sample(k, rng));
                }
            }
        }
        Tensor::matrix(n, l, v).expect("prior sample shape")
    }

    fn log_likelihood(&self, x: &[f64], mask: &[bool], samples: usize, rng: &mut Rng) -> Result<f64> {
        validate_row(&self.schema, x, mask)?;
        let d = self.schema.width();
        let l = self.latent_width();
        let obs: Vec<usize> = (0..d).filter(|&c| mask[c]).collect();
        if obs.is_empty() {
            return Ok(0.0);
        }
        let q = self.posterior(x, &[], mask)?;
        let (qm, qlv) = (q.mean(0).to_vec(), q.logvar(0).to_vec());
        let s = samples.max(1);
        let mut logw = Vec::with_capacity(s);
        let mut done = 0;
        while done < s {
            let k = 1000.min(s - done);
            let mut hv = Vec::with_capacity(k * l);
            let mut lw = vec![0.0; k];
            for w in lw.iter_mut() {
                let h: Vec<f64> = (0..l).map(|j| qm[j] + (0.5 * qlv[j]).exp() * gaussian::std_normal(rng)).collect();
                *w = self.prior_log_prob(&h) - log_normal_diag(&h, &qm, &qlv);
                hv.extend(h);
            }
            let out = self.decode(&Tensor::matrix(k, l, hv)?)?;
            for (r, w) in lw.iter_mut().enumerate() {
                for &c in &obs {
                    *w += self.heads[c].log_prob_unchecked(self.head_slice(&out, r, c), x[c]);
                }
            }
            logw.extend(lw);
            done += k;
        }
        Ok(kernels::log_sum_exp(&logw) - (s as f64).ln())
    }

    fn impute(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        validate_row(&self.schema, x, mask)?;
        let q = self.posterior(x, &[], mask)?;
        let out = self.decode(&q.means)?;
        Ok((0..x.len())
            .map(|c| if mask[c] { x[c] } else { self.heads[c].mode(self.head_slice(&out, 0, c)) })
            .collect())
    }
}

impl DiscriminatorHost for FlatVae {
    fn host_params(&self) -> &ParamSet {
        &self.params
    }

    fn host_params_mut(&mut self) -> &mut ParamSet {
        self.prior_cache = None;
        &mut self.params
    }

    fn encoder_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    fn elbo_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &[f64],
        _z: &[f64],
        mask: &[bool],
        eps: &[f64],
        extra: Option<&[Vec<Element>]>,
    ) -> Result<(Var, Var)> {
        self.elbo_tape_weighted(tape, bound, x, mask, eps, extra, None)
    }

    fn target_elements(&self, x_phi: f64, disc: &Discriminator) -> Vec<Element> {
        vec![Element::X {
            feature: disc.target,
            value: x_phi,
        }]
    }

    fn refresh(&mut self) -> Result<()> {
        self.refresh_prior()
    }

    fn install_discriminator(&mut self, disc: Discriminator) {
        self.discriminator = Some(disc);
    }
}
