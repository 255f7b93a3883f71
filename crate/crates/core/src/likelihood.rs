//! Observation likelihoods `p(x | decoder output)` for each column kind.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::data::{ColumnKind, ColumnSpec};
use crate::error::{Error, Result};
use crate::gaussian::{std_normal, LN_2PI};

/// Default observation noise of Gaussian heads, as a standard deviation.
pub const NOISE_SD: f64 = 0.02;
/// Observation noise for schemas flagged `high_noise`.
pub const HIGH_NOISE_SD: f64 = 0.3;

/// Keeps ordinal log-masses finite when a level's mass underflows.
const ORDINAL_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LikelihoodHead {
    /// Decoder output is the mean.
    Gaussian { variance: f64 },
    /// Trained as a Gaussian; samples and modes snap to `grid` (normalized units).
    DiscreteGaussian { variance: f64, grid: Vec<f64> },
    /// Decoder output is the logit vector.
    Categorical { classes: usize },
    /// Cumulative-logistic link. Decoder output is `[location, first cutpoint,
    /// raw increments...]`; increments pass through softplus.
    Ordinal { levels: usize },
}

impl LikelihoodHead {
    pub fn noise_variance(high_noise: bool) -> f64 {
        let sd = if high_noise { HIGH_NOISE_SD } else { NOISE_SD };
        sd * sd
    }

    pub fn for_column(spec: &ColumnSpec, variance: f64) -> Self {
        match &spec.kind {
            ColumnKind::Continuous => LikelihoodHead::Gaussian { variance },
            ColumnKind::DiscreteContinuous { grid } => LikelihoodHead::DiscreteGaussian {
                variance,
                grid: grid.iter().map(|g| (g - spec.min) / (spec.max - spec.min)).collect(),
            },
            ColumnKind::Categorical { labels } => LikelihoodHead::Categorical { classes: labels.len() },
            ColumnKind::Ordinal { levels } => LikelihoodHead::Ordinal { levels: levels.len() },
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LikelihoodHead::Gaussian { .. } | LikelihoodHead::DiscreteGaussian { .. } => 1,
            LikelihoodHead::Categorical { classes } => *classes,
            LikelihoodHead::Ordinal { levels } => *levels,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, LikelihoodHead::Gaussian { .. } | LikelihoodHead::DiscreteGaussian { .. })
    }

    /// Number of outcomes for discrete heads.
    pub fn classes(&self) -> Option<usize> {
        match self {
            LikelihoodHead::Categorical { classes } => Some(*classes),
            LikelihoodHead::Ordinal { levels } => Some(*levels),
            _ => None,
        }
    }

    fn check(&self, out: &[f64], x: f64) -> Result<()> {
        if out.len() != self.output_dim() {
            return Err(Error::shape("log_prob", &[&[out.len()], &[self.output_dim()]]));
        }
        let bad = |reason: String| {
            Err(Error::InvalidObservation {
                field: "observed".into(),
                reason,
            })
        };
        if !x.is_finite() {
            return bad(format!("non-finite value {x}"));
        }
        if let Some(k) = self.classes() {
            if x.fract() != 0.0 || x < 0.0 || x >= k as f64 {
                return bad(format!("class index {x} not in 0..{k}"));
            }
        }
        Ok(())
    }

    /// Class probabilities of a discrete head.
    pub fn probs(&self, out: &[f64]) -> Vec<f64> {
        match self {
            LikelihoodHead::Categorical { .. } => {
                let mut p = out.to_vec();
                kernels::softmax_in_place(&mut p);
                p
            }
            LikelihoodHead::Ordinal { levels } => ordinal_masses(out, *levels),
            _ => Vec::new(),
        }
    }

    pub fn log_prob(&self, out: &[f64], x: f64) -> Result<f64> {
        self.check(out, x)?;
        Ok(self.log_prob_unchecked(out, x))
    }

    pub(crate) fn log_prob_unchecked(&self, out: &[f64], x: f64) -> f64 {
        match self {
            LikelihoodHead::Gaussian { variance } | LikelihoodHead::DiscreteGaussian { variance, .. } => {
                let d = x - out[0];
                -0.5 * (LN_2PI + variance.ln()) - d * d / (2.0 * variance)
            }
            LikelihoodHead::Categorical { .. } => {
                let mut l = out.to_vec();
                kernels::log_softmax_in_place(&mut l);
                l[x as usize]
            }
            LikelihoodHead::Ordinal { levels } => (ordinal_masses(out, *levels)[x as usize] + ORDINAL_FLOOR).ln(),
        }
    }

    /// Row-wise log-likelihood of `x` (one value per row) under decoder output
    /// `out` (`B×output_dim`), giving `B×1`.
    pub fn log_prob_rows(&self, tape: &mut Tape, out: Var, x: &[f64]) -> Result<Var> {
        let b = x.len();
        let w = self.output_dim();
        if tape.value(out).shape() != [b, w] {
            return Err(Error::shape("log_prob_rows", &[tape.value(out).shape(), &[b, w]]));
        }
        match self {
            LikelihoodHead::Gaussian { variance } | LikelihoodHead::DiscreteGaussian { variance, .. } => {
                let xv = tape.constant(Tensor::column(x.to_vec()));
                let d = tape.sub(xv, out)?;
                let sq = tape.square(d)?;
                let s = tape.scale(sq, -1.0 / (2.0 * variance))?;
                tape.offset(s, -0.5 * (LN_2PI + variance.ln()))
            }
            LikelihoodHead::Categorical { classes } => {
                let logp = tape.log_softmax_rows(out)?;
                select(tape, logp, x, *classes)
            }
            LikelihoodHead::Ordinal { levels } => {
                let l = *levels;
                let loc = tape.slice_cols(out, 0, 1)?;
                let mut cuts = vec![tape.slice_cols(out, 1, 2)?];
                for j in 2..l {
                    let raw = tape.slice_cols(out, j, j + 1)?;
                    let inc = tape.softplus(raw)?;
                    let prev = *cuts.last().unwrap();
                    cuts.push(tape.add(prev, inc)?);
                }
                let c = tape.concat_cols(&cuts)?;
                let centred = tape.sub(c, loc)?;
                let cdf = tape.sigmoid(centred)?;
                let zeros = tape.constant(Tensor::zeros(b, 1));
                let ones = tape.constant(Tensor::filled(b, 1, 1.0));
                let ext = tape.concat_cols(&[zeros, cdf, ones])?;
                let hi = tape.slice_cols(ext, 1, l + 1)?;
                let lo = tape.slice_cols(ext, 0, l)?;
                let mass = tape.sub(hi, lo)?;
                let floored = tape.offset(mass, ORDINAL_FLOOR)?;
                let logp = tape.log(floored)?;
                select(tape, logp, x, l)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, out: &[f64], rng: &mut R) -> f64 {
        match self {
            LikelihoodHead::Gaussian { variance } => out[0] + variance.sqrt() * std_normal(rng),
            LikelihoodHead::DiscreteGaussian { variance, grid } => {
                snap(grid, out[0] + variance.sqrt() * std_normal(rng))
            }
            _ => {
                let p = self.probs(out);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        return i as f64;
                    }
                }
                (p.len() - 1) as f64
            }
        }
    }

    pub fn mode(&self, out: &[f64]) -> f64 {
        match self {
            LikelihoodHead::Gaussian { .. } => out[0],
            LikelihoodHead::DiscreteGaussian { grid, .. } => snap(grid, out[0]),
            _ => argmax(&self.probs(out)) as f64,
        }
    }
}

fn select(tape: &mut Tape, logp: Var, x: &[f64], classes: usize) -> Result<Var> {
    let mut onehot = vec![0.0; x.len() * classes];
    for (i, &v) in x.iter().enumerate() {
        let k = v as usize;
        if v < 0.0 || k >= classes {
            return Err(Error::InvalidObservation {
                field: "observed".into(),
                reason: format!("class index {v} not in 0..{classes}"),
            });
        }
        onehot[i * classes + k] = 1.0;
    }
    let oh = tape.constant(Tensor::matrix(x.len(), classes, onehot)?);
    let picked = tape.mul(logp, oh)?;
    tape.sum_cols(picked)
}

pub fn ordinal_cutpoints(out: &[f64], levels: usize) -> Vec<f64> {
    let mut cuts = Vec::with_capacity(levels - 1);
    let mut c = out[1];
    cuts.push(c);
    for raw in &out[2..levels] {
        c += kernels::softplus(*raw);
        cuts.push(c);
    }
    cuts
}

pub fn ordinal_masses(out: &[f64], levels: usize) -> Vec<f64> {
    let cuts = ordinal_cutpoints(out, levels);
    let mut prev = 0.0;
    let mut masses = Vec::with_capacity(levels);
    for c in cuts {
        let f = kernels::sigmoid(c - out[0]);
        masses.push(f - prev);
        prev = f;
    }
    masses.push(1.0 - prev);
    masses
}

pub fn snap(grid: &[f64], v: f64) -> f64 {
    grid.iter()
        .copied()
        .min_by(|a, b| (a - v).abs().total_cmp(&(b - v).abs()))
        .unwrap_or(v)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
