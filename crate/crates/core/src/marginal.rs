//! Stage one: a VAE with a scalar latent for each column.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AdamState, Init, Mlp, ParamSet, ParamSpec, Tape, Tensor};
use crate::error::{Error, Result};
use crate::gaussian::{self, kl_std_normal_rows, log_normal, reparam};
use crate::likelihood::LikelihoodHead;
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: usize,
    /// Epoch window for the plateau test; 0 disables early stopping.
    pub plateau_window: usize,
    /// Stop when the windowed mean ELBO improves by less than this fraction.
    pub plateau_tol: f64,
    #[serde(default = "default_init")]
    pub init: Init,
}

fn default_init() -> Init {
    Init::FanIn
}

impl Default for MarginalConfig {
    fn default() -> Self {
        MarginalConfig {
            epochs: 1000,
            batch_size: 100,
            lr: 1e-3,
            hidden: 50,
            plateau_window: 50,
            plateau_tol: 1e-4,
            init: Init::FanIn,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalVae {
    pub head: LikelihoodHead,
    pub hidden: usize,
    pub params: ParamSet,
    encoder: Mlp,
    decoder: Mlp,
}

#[derive(Serialize, Deserialize)]
struct MarginalDoc {
    head: LikelihoodHead,
    hidden: usize,
    params: Vec<ParamSpec>,
}

impl Serialize for MarginalVae {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MarginalDoc {
            head: self.head.clone(),
            hidden: self.hidden,
            params: self.params.to_specs(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MarginalVae {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = MarginalDoc::deserialize(d)?;
        let mut vae = MarginalVae::new(doc.head, doc.hidden, Init::Zero, &mut rng::seeded(0));
        vae.params.load_specs(&doc.params).map_err(serde::de::Error::custom)?;
        Ok(vae)
    }
}

/// Training outcome: the model and its per-epoch mean ELBO.
#[derive(Clone, Debug)]
pub struct MarginalFit {
    pub vae: MarginalVae,
    pub history: Vec<f64>,
}

impl MarginalVae {
    pub fn new(head: LikelihoodHead, hidden: usize, init: Init, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let v = head.classes().unwrap_or(1);
        let encoder = Mlp::new(&mut params, "enc", &[v, hidden, 2], Activation::Identity, init, rng);
        let out = if head.is_gaussian() {
            Activation::Sigmoid
        } else {
            Activation::Identity
        };
        let decoder = Mlp::new(&mut params, "dec", &[1, hidden, head.output_dim()], out, init, rng);
        MarginalVae {
            head,
            hidden,
            params,
            encoder,
            decoder,
        }
    }

    /// Zeroes the encoder's output layer so every input encodes to `N(0, 1)`.
    pub fn zero_encoder_output(&mut self) {
        let last = *self.encoder.layers.last().expect("encoder has layers");
        self.params.value_mut(last.w).values_mut().fill(0.0);
        self.params.value_mut(last.b).values_mut().fill(0.0);
    }

    pub fn input_width(&self) -> usize {
        self.encoder.input_dim()
    }

    fn inputs(&self, xs: &[f64]) -> Tensor {
        let v = self.input_width();
        if v == 1 {
            return Tensor::column(xs.to_vec());
        }
        let mut t = Tensor::zeros(xs.len(), v);
        for (i, &x) in xs.iter().enumerate() {
            t.values_mut()[i * v + x as usize] = 1.0;
        }
        t
    }

    fn check_values(&self, xs: &[f64]) -> Result<()> {
        for &x in xs {
            let ok = match self.head.classes() {
                Some(k) => x.fract() == 0.0 && x >= 0.0 && x < k as f64,
                None => x.is_finite(),
            };
            if !ok {
                return Err(Error::InvalidObservation {
                    field: "x".into(),
                    reason: format!("value {x} invalid for {:?}", self.head),
                });
            }
        }
        Ok(())
    }

    /// Posterior `(mean, log-variance)` of the scalar latent for each value.
    pub fn encode_batch(&self, xs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_values(xs)?;
        let out = self.encoder.infer(&self.params, &self.inputs(xs))?;
        let v = out.values();
        Ok((
            (0..xs.len()).map(|i| v[2 * i]).collect(),
            (0..xs.len()).map(|i| v[2 * i + 1]).collect(),
        ))
    }

    /// `(mean, variance)` of `q(z | x)`.
    pub fn encode(&self, x: f64) -> Result<(f64, f64)> {
        let (m, lv) = self.encode_batch(&[x])?;
        Ok((m[0], lv[0].exp()))
    }

    /// Decoder outputs (`B×output_dim`) for a batch of latents.
    pub fn decode_batch(&self, zs: &[f64]) -> Result<Tensor> {
        self.decoder.infer(&self.params, &Tensor::column(zs.to_vec()))
    }

    pub fn decode(&self, z: f64) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&[z])?.into_values())
    }

    /// Mean single-sample ELBO of `xs` on a fresh tape bound to `params`.
    fn elbo_on_tape(&self, tape: &mut Tape, xs: &[f64], eps: &[f64], trainable: bool) -> Result<crate::autodiff::Var> {
        let bound = tape.bind(&self.params, trainable);
        let x = tape.constant(self.inputs(xs));
        let enc = self.encoder.forward(tape, &bound, x)?;
        let mean = tape.slice_cols(enc, 0, 1)?;
        let logvar = tape.slice_cols(enc, 1, 2)?;
        let e = tape.constant(Tensor::column(eps.to_vec()));
        let z = reparam(tape, mean, logvar, e)?;
        let out = self.decoder.forward(tape, &bound, z)?;
        let rec = self.head.log_prob_rows(tape, out, xs)?;
        let kl = kl_std_normal_rows(tape, mean, logvar)?;
        let elbo = tape.sub(rec, kl)?;
        tape.mean(elbo)
    }

    /// Trains on the observed values of one column.
    pub fn train(
        head: LikelihoodHead,
        values: &[f64],
        config: &MarginalConfig,
        rng: &mut Rng,
    ) -> Result<MarginalFit> {
        if values.is_empty() {
            return Err(Error::NoObservedCells("marginal".into()));
        }
        let mut vae = MarginalVae::new(head, config.hidden, config.init, rng);
        vae.check_values(values)?;
        let mut adam = AdamState::with_lr(&vae.params, config.lr);
        let mut order: Vec<usize> = (0..values.len()).collect();
        let mut history = Vec::with_capacity(config.epochs);
        let bs = config.batch_size.max(1);
        for epoch in 0..config.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(bs) {
                let xs: Vec<f64> = chunk.iter().map(|&i| values[i]).collect();
                let eps = gaussian::std_normals(rng, xs.len());
                let mut tape = Tape::new();
                let elbo = vae.elbo_on_tape(&mut tape, &xs, &eps, true)?;
                let loss = tape.neg(elbo)?;
                total += tape.value(elbo).item() * xs.len() as f64;
                tape.backward(loss, &mut vae.params)?;
                adam.step(&mut vae.params)?;
            }
            history.push(total / values.len() as f64);
            if plateaued(&history, config.plateau_window, config.plateau_tol) {
                log::debug!("marginal plateau after {} epochs", epoch + 1);
                break;
            }
        }
        Ok(MarginalFit { vae, history })
    }

    /// Single-sample ELBO of `xs` averaged over rows, with frozen noise `eps`.
    pub fn elbo_with_noise(&self, xs: &[f64], eps: &[f64]) -> Result<f64> {
        self.check_values(xs)?;
        let mut tape = Tape::new();
        let v = self.elbo_on_tape(&mut tape, xs, eps, false)?;
        Ok(tape.value(v).item())
    }

    /// Per-point ELBO (analytic KL, `samples` reconstruction draws) and the
    /// importance-sampled log-likelihood using `q(z | x)` as proposal, both
    /// averaged over `xs`.
    pub fn elbo_and_is_ll(&self, xs: &[f64], samples: usize, rng: &mut Rng) -> Result<(f64, f64)> {
        let (means, logvars) = self.encode_batch(xs)?;
        let s = samples.max(1);
        let (mut elbo_total, mut ll_total) = (0.0, 0.0);
        for (i, &x) in xs.iter().enumerate() {
            let (m, lv) = (means[i], logvars[i]);
            let sd = (0.5 * lv).exp();
            let zs: Vec<f64> = (0..s).map(|_| m + sd * gaussian::std_normal(rng)).collect();
            let out = self.decode_batch(&zs)?;
            let w = self.head.output_dim();
            let mut rec = 0.0;
            let mut logw = Vec::with_capacity(s);
            for (j, &z) in zs.iter().enumerate() {
                let lp = self.head.log_prob_unchecked(&out.values()[j * w..(j + 1) * w], x);
                rec += lp;
                logw.push(lp + log_normal(z, 0.0, 0.0) - log_normal(z, m, lv));
            }
            let kl = 0.5 * (m * m + lv.exp() - lv - 1.0);
            elbo_total += rec / s as f64 - kl;
            ll_total += crate::autodiff::kernels::log_sum_exp(&logw) - (s as f64).ln();
        }
        let n = xs.len() as f64;
        Ok((elbo_total / n, ll_total / n))
    }
}

/// True once the last `window` epochs improve on the previous `window` by
/// less than `tol` relative.
pub fn plateaued(history: &[f64], window: usize, tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let recent: f64 = history[n - window..].iter().sum::<f64>() / window as f64;
    let before: f64 = history[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    (recent - before) / before.abs().max(1e-8) < tol
}
