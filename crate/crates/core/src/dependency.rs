//! Stage two: a VAE over the stacked marginal latents with a VampPrior and a
//! permutation-invariant partial inference network.

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Activation, AdamState, Bound, Init, Mlp, ParamId, ParamSet, ParamSpec, SetBatch, Tape, Tensor, Var};
use crate::data::MissingnessSampler;
use crate::error::{Error, Result};
use crate::gaussian::{self, LN_2PI};
use crate::partial::concat_sets;
pub use crate::partial::{Element, PartialEncoder};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyConfig {
    pub latent: usize,
    pub embed: usize,
    pub features: usize,
    pub head_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub k_prior: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DependencyConfig {
    fn default() -> Self {
        DependencyConfig {
            latent: 20,
            embed: 10,
            features: 100,
            head_hidden: vec![500, 200],
            decoder_hidden: vec![50, 100],
            k_prior: 50,
            epochs: 1000,
            batch_size: 100,
            lr: 1e-3,
        }
    }
}

/// A fully observed training row whose encoding is a VampPrior component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoInput {
    pub row: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Per-dimension Gaussians over `z`: `B×D` means and log-variances.
#[derive(Clone, Debug, PartialEq)]
pub struct ZGaussian {
    pub means: Tensor,
    pub logvars: Tensor,
}

/// Diagonal Gaussians over `h`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct HGaussian {
    pub means: Tensor,
    pub logvars: Tensor,
}

impl HGaussian {
    pub fn rows(&self) -> usize {
        self.means.rows()
    }

    pub fn mean(&self, r: usize) -> &[f64] {
        self.means.row_slice(r)
    }

    pub fn logvar(&self, r: usize) -> &[f64] {
        self.logvars.row_slice(r)
    }

    pub fn sample(&self, r: usize, rng: &mut Rng) -> Vec<f64> {
        self.mean(r)
            .iter()
            .zip(self.logvar(r))
            .map(|(m, lv)| m + (0.5 * lv).exp() * gaussian::std_normal(rng))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DependencyVae {
    pub config: DependencyConfig,
    cards: Vec<usize>,
    params: ParamSet,
    encoder: PartialEncoder,
    decoder: Mlp,
    pseudo: Vec<PseudoInput>,
    prior_cache: Option<HGaussian>,
}

#[derive(Serialize, Deserialize)]
struct DependencyDoc {
    config: DependencyConfig,
    cards: Vec<usize>,
    pseudo_inputs: Vec<PseudoInput>,
    params: Vec<ParamSpec>,
}

impl Serialize for DependencyVae {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        DependencyDoc {
            config: self.config.clone(),
            cards: self.cards.clone(),
            pseudo_inputs: self.pseudo.clone(),
            params: self.params.to_specs(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DependencyVae {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = DependencyDoc::deserialize(d)?;
        let mut vae = DependencyVae::new(&doc.cards, doc.config, Init::Zero, &mut rng::seeded(0));
        vae.params.load_specs(&doc.params).map_err(serde::de::Error::custom)?;
        vae.set_pseudo_inputs(doc.pseudo_inputs).map_err(serde::de::Error::custom)?;
        Ok(vae)
    }
}

impl PartialEq for DependencyVae {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.cards == other.cards
            && self.params == other.params
            && self.pseudo == other.pseudo
    }
}

impl DependencyVae {
    /// `cards[d]` is the class count of column `d` (1 for continuous kinds).
    pub fn new(cards: &[usize], config: DependencyConfig, init: Init, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let l = config.latent;
        let encoder = PartialEncoder::new(
            &mut params,
            cards,
            true,
            config.embed,
            config.features,
            &config.head_hidden,
            l,
            init,
            rng,
        );
        let mut dec_sizes = vec![l];
        dec_sizes.extend(&config.decoder_hidden);
        dec_sizes.push(2 * cards.len());
        let decoder = Mlp::new(&mut params, "decoder", &dec_sizes, Activation::Identity, init, rng);
        DependencyVae {
            config,
            cards: cards.to_vec(),
            params,
            encoder,
            decoder,
            pseudo: Vec::new(),
            prior_cache: None,
        }
    }

    pub fn width(&self) -> usize {
        self.cards.len()
    }

    pub fn latent(&self) -> usize {
        self.config.latent
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        self.prior_cache = None;
        &mut self.params
    }

    pub fn pseudo_inputs(&self) -> &[PseudoInput] {
        &self.pseudo
    }

    pub fn set_pseudo_inputs(&mut self, pseudo: Vec<PseudoInput>) -> Result<()> {
        let d = self.width();
        if pseudo.iter().any(|p| p.x.len() != d || p.z.len() != d || p.mask.len() != d) {
            return Err(Error::InvalidArgument("pseudo-input width differs from model".into()));
        }
        self.pseudo = pseudo;
        self.prior_cache = None;
        self.refresh_prior()
    }

    /// Recomputes the cached VampPrior components after a parameter change.
    pub fn refresh_prior(&mut self) -> Result<()> {
        self.prior_cache = if self.pseudo.is_empty() {
            None
        } else {
            let set = self.pseudo_set();
            Some(self.encode_set(&set)?)
        };
        Ok(())
    }

    pub fn encoder(&self) -> &PartialEncoder {
        &self.encoder
    }

    /// Ids of the generative side (`ψ`).
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.decoder.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }

    /// Slot layout for rows of `(x, z, mask)`; each observed feature yields
    /// its x-element then its z-element, in column order.
    pub fn row_set(&self, x: &[f64], z: &[f64], mask: &[bool]) -> Result<SetBatch> {
        self.encoder.row_set(x, Some(z), mask)
    }

    pub fn element_set(&self, rows: &[Vec<Element>]) -> Result<SetBatch> {
        self.encoder.element_set(rows)
    }

    fn pseudo_set(&self) -> SetBatch {
        let x: Vec<f64> = self.pseudo.iter().flat_map(|p| p.x.iter().copied()).collect();
        let z: Vec<f64> = self.pseudo.iter().flat_map(|p| p.z.iter().copied()).collect();
        let m: Vec<bool> = self.pseudo.iter().flat_map(|p| p.mask.iter().copied()).collect();
        self.row_set(&x, &z, &m).expect("pseudo-inputs validated on insert")
    }

    /// `q(h | elements)` for every row of `set`.
    pub fn encode_set(&self, set: &SetBatch) -> Result<HGaussian> {
        self.encoder.encode(&self.params, set)
    }

    pub fn encode_rows(&self, x: &[f64], z: &[f64], mask: &[bool]) -> Result<HGaussian> {
        self.encode_set(&self.row_set(x, z, mask)?)
    }

    /// `q(h | z_O, x_O)` for a single set of elements, in any order.
    pub fn partial_encode(&self, elements: &[Element]) -> Result<(Vec<f64>, Vec<f64>)> {
        let g = self.encode_set(&self.element_set(&[elements.to_vec()])?)?;
        Ok((g.mean(0).to_vec(), g.logvar(0).iter().map(|lv| lv.exp()).collect()))
    }

    pub fn decode_z(&self, h: &Tensor) -> Result<ZGaussian> {
        let out = self.decoder.infer(&self.params, h)?;
        let g = crate::partial::split_gaussian(&out, self.width());
        Ok(ZGaussian {
            means: g.means,
            logvars: g.logvars,
        })
    }

    /// VampPrior components; empty when no pseudo-inputs are set.
    pub fn prior_components(&self) -> Option<&HGaussian> {
        self.prior_cache.as_ref()
    }

    /// `log p(h)` under the VampPrior, or the standard normal when no
    /// pseudo-inputs are set.
    pub fn prior_log_prob(&self, h: &[f64]) -> f64 {
        match &self.prior_cache {
            None => gaussian::log_normal_diag(h, &vec![0.0; h.len()], &vec![0.0; h.len()]),
            Some(c) => mixture_log_prob(h, c),
        }
    }

    /// Draws `h` from the prior: a uniformly chosen component, then its Gaussian.
    pub fn sample_prior(&self, rng: &mut Rng) -> Vec<f64> {
        match &self.prior_cache {
            None => gaussian::std_normals(rng, self.latent()),
            Some(c) => {
                let k = rand::Rng::random_range(rng, 0..c.rows());
                c.sample(k, rng)
            }
        }
    }

    // Tape-side pieces shared with discriminator training.

    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        tape.bind(&self.params, trainable)
    }

    pub(crate) fn encode_tape(&self, tape: &mut Tape, bound: &Bound, set: SetBatch) -> Result<(Var, Var)> {
        self.encoder.encode_tape(tape, bound, set)
    }

    pub(crate) fn decode_tape(&self, tape: &mut Tape, bound: &Bound, h: Var) -> Result<(Var, Var)> {
        let out = self.decoder.forward(tape, bound, h)?;
        let d = self.width();
        Ok((tape.slice_cols(out, 0, d)?, tape.slice_cols(out, d, 2 * d)?))
    }

    /// Row-wise partial ELBO on the tape, with the sampled `h`. `eps` (`B×L`)
    /// fixes the `h` draws; `extra` appends elements to each row's set.
    /// Pseudo-inputs are encoded in the same pass so the prior is differentiable.
    #[allow(clippy::too_many_arguments)]
    pub fn partial_elbo_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &[f64],
        z: &[f64],
        mask: &[bool],
        eps: &[f64],
        extra: Option<&[Vec<Element>]>,
    ) -> Result<(Var, Var)> {
        let d = self.width();
        let b = mask.len() / d;
        let l = self.latent();
        let mut set = self.row_set(x, z, mask)?;
        if let Some(extra) = extra {
            for j in 0..extra.iter().map(Vec::len).max().unwrap_or(0) {
                let col: Vec<Element> = extra.iter().map(|e| e[j]).collect();
                set = self.encoder.append(&set, &col)?;
            }
        }
        let n_pseudo = self.pseudo.len();
        let full = if n_pseudo > 0 {
            concat_sets(&set, &self.pseudo_set())
        } else {
            set
        };
        let (mean_all, lv_all) = self.encode_tape(tape, bound, full)?;
        let (mean, lv) = if n_pseudo > 0 {
            (tape.slice_rows(mean_all, 0, b)?, tape.slice_rows(lv_all, 0, b)?)
        } else {
            (mean_all, lv_all)
        };
        let e = tape.constant(Tensor::matrix(b, l, eps.to_vec())?);
        let h = gaussian::reparam(tape, mean, lv, e)?;
        let rec = self.rec_tape(tape, bound, h, z, mask)?;
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

    /// `Σ_{d∈O} log p(z_d | h)` per row.
    pub(crate) fn rec_tape(&self, tape: &mut Tape, bound: &Bound, h: Var, z: &[f64], mask: &[bool]) -> Result<Var> {
        let d = self.width();
        let b = mask.len() / d;
        let (zm, zlv) = self.decode_tape(tape, bound, h)?;
        let zc = tape.constant(Tensor::matrix(b, d, z.to_vec())?);
        let diff = tape.sub(zc, zm)?;
        let sq = tape.square(diff)?;
        let neg = tape.neg(zlv)?;
        let prec = tape.exp(neg)?;
        let quad = tape.mul(sq, prec)?;
        let with_lv = tape.add(quad, zlv)?;
        let per = tape.offset(with_lv, LN_2PI)?;
        let m = tape.constant(Tensor::matrix(b, d, mask.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())?);
        let masked = tape.mul(per, m)?;
        let s = tape.sum_cols(masked)?;
        tape.scale(s, -0.5)
    }

    /// Row-wise partial ELBO with frozen noise, without gradients.
    pub fn partial_elbo_rows(&self, x: &[f64], z: &[f64], mask: &[bool], eps: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let (v, _) = self.partial_elbo_tape(&mut tape, &bound, x, z, mask, eps, None)?;
        Ok(tape.value(v).values().to_vec())
    }

    /// Number of VampPrior components used for a training set of `n` rows.
    pub fn prior_size(requested: usize, n: usize) -> usize {
        requested.min(n / 10).max(1).min(n.max(1))
    }

    /// Picks pseudo-inputs among `candidates` (row indices into `x`/`mask`).
    pub fn choose_pseudo_inputs(
        &mut self,
        x: &[f64],
        z_means: &[f64],
        mask: &[bool],
        rng: &mut Rng,
    ) -> Result<()> {
        let d = self.width();
        let n = mask.len() / d;
        let k = Self::prior_size(self.config.k_prior, n);
        let mut rows: Vec<usize> = index::sample(rng, n, k).into_vec();
        rows.sort_unstable();
        let pseudo = rows
            .into_iter()
            .map(|r| PseudoInput {
                row: r,
                x: x[r * d..(r + 1) * d].to_vec(),
                z: z_means[r * d..(r + 1) * d].to_vec(),
                mask: mask[r * d..(r + 1) * d].to_vec(),
            })
            .collect();
        self.set_pseudo_inputs(pseudo)
    }

    /// Maximizes the partial ELBO. `z_mean`/`z_logvar` are the frozen marginal
    /// posteriors of every cell; latents are redrawn for every minibatch.
    pub fn train(
        &mut self,
        x: &[f64],
        z_mean: &[f64],
        z_logvar: &[f64],
        base_mask: &[bool],
        sampler: &MissingnessSampler,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let d = self.width();
        let n = base_mask.len() / d;
        let l = self.latent();
        let mut adam = AdamState::with_lr(&self.params, self.config.lr);
        let mut order: Vec<usize> = (0..n).collect();
        let mut history = Vec::with_capacity(self.config.epochs);
        let bs = self.config.batch_size.max(1);
        for epoch in 0..self.config.epochs {
            let mask = sampler.sample_epoch_mask(base_mask, epoch as u64);
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(bs) {
                let (bx, bz, bm) = gather(chunk, d, x, &mask, |i| {
                    z_mean[i] + (0.5 * z_logvar[i]).exp() * gaussian::std_normal(rng)
                });
                let eps = gaussian::std_normals(rng, chunk.len() * l);
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape, true);
                let (elbo, _) = self.partial_elbo_tape(&mut tape, &bound, &bx, &bz, &bm, &eps, None)?;
                let mean = tape.mean(elbo)?;
                total += tape.value(mean).item() * chunk.len() as f64;
                let loss = tape.neg(mean)?;
                tape.backward(loss, &mut self.params)?;
                adam.step(&mut self.params)?;
            }
            history.push(total / n as f64);
        }
        self.refresh_prior()?;
        Ok(history)
    }
}

/// Gathers rows `idx` of `x` and `mask`, drawing z for every cell with `draw`.
pub(crate) fn gather(
    idx: &[usize],
    d: usize,
    x: &[f64],
    mask: &[bool],
    mut draw: impl FnMut(usize) -> f64,
) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let mut bx = Vec::with_capacity(idx.len() * d);
    let mut bz = Vec::with_capacity(idx.len() * d);
    let mut bm = Vec::with_capacity(idx.len() * d);
    for &r in idx {
        for c in 0..d {
            let i = r * d + c;
            bx.push(x[i]);
            bz.push(draw(i));
            bm.push(mask[i]);
        }
    }
    (bx, bz, bm)
}

/// Log-density of a uniform mixture of diagonal Gaussians.
pub fn mixture_log_prob(h: &[f64], comps: &HGaussian) -> f64 {
    let logs: Vec<f64> = (0..comps.rows())
        .map(|k| gaussian::log_normal_diag(h, comps.mean(k), comps.logvar(k)))
        .collect();
    kernels::log_sum_exp(&logs) - (comps.rows() as f64).ln()
}

/// Row-wise uniform-mixture log-density of `h` (`B×L`) with components
/// `means`/`logvars` (`K×L`), giving `B×1`.
pub(crate) fn mixture_log_prob_tape(tape: &mut Tape, h: Var, means: Var, logvars: Var) -> Result<Var> {
    let k = tape.value(means).rows();
    let l = tape.value(means).cols();
    let neg = tape.neg(logvars)?;
    let prec = tape.exp(neg)?;
    let prec_t = tape.transpose(prec)?;
    let h2 = tape.square(h)?;
    let t1 = tape.matmul(h2, prec_t)?;
    let mp = tape.mul(means, prec)?;
    let mp_t = tape.transpose(mp)?;
    let cross = tape.matmul(h, mp_t)?;
    let t2 = tape.scale(cross, -2.0)?;
    let m2 = tape.square(means)?;
    let m2p = tape.mul(m2, prec)?;
    let c = tape.sum_cols(m2p)?;
    let c_t = tape.transpose(c)?;
    let slv = tape.sum_cols(logvars)?;
    let slv_t = tape.transpose(slv)?;
    let q = tape.add(t1, t2)?;
    let q = tape.add(q, c_t)?;
    let q = tape.add(q, slv_t)?;
    let q = tape.offset(q, l as f64 * LN_2PI)?;
    let logn = tape.scale(q, -0.5)?;
    let lse = tape.log_sum_exp_cols(logn)?;
    tape.offset(lse, -(k as f64).ln())
}
