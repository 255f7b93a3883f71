//! Sequential active information acquisition: latent-space reward
//! estimates, the global greedy ordering, information curves and AUIC.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{ColumnKind, ColumnSpec, Dataset};
use crate::dependency::Element;
use crate::error::{Error, Result};
use crate::gaussian::kl_diag;
use crate::model::{predict_target, validate_row, Draw, TabularModel};
use crate::rng::{self, derive_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimate {
    pub candidate: usize,
    /// Nats; Monte Carlo noise can make it negative.
    pub reward: f64,
    pub outer_samples: usize,
    pub inner_samples: usize,
    pub outer_seed: u64,
    pub inner_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaiaConfig {
    pub outer_samples: usize,
    pub inner_samples: usize,
    /// Conditional draws per target prediction.
    pub mc_samples: usize,
}

impl Default for SaiaConfig {
    fn default() -> Self {
        SaiaConfig {
            outer_samples: 10,
            inner_samples: 10,
            mc_samples: 10,
        }
    }
}

/// Columns a model may acquire: everything but the target.
pub fn candidates(model: &dyn TabularModel) -> Vec<usize> {
    let schema = model.schema();
    (0..schema.width()).filter(|&c| !schema.columns[c].is_target).collect()
}

fn cell_elements(model: &dyn TabularModel, target: usize, c: usize, x: f64, z: Option<f64>) -> Vec<Element> {
    let mut out = vec![Element::X { feature: c, value: x }];
    if let Some(z) = z {
        let value = if c == target { model.target_latent(x, z) } else { z };
        out.push(Element::Z { feature: c, value });
    }
    out
}

fn extend(base: &[Element], extra: Vec<Element>) -> Vec<Element> {
    let mut v = base.to_vec();
    v.extend(extra);
    v
}

pub fn estimate_reward(
    model: &dyn TabularModel,
    x: &[f64],
    mask: &[bool],
    candidate: usize,
    config: &SaiaConfig,
    seed: u64,
) -> Result<RewardEstimate> {
    Ok(estimate_rewards(model, x, mask, &[candidate], config, seed)?.remove(0))
}

/// Rewards for several candidates of one row. Outer draws of
/// `(x_i, z_i, z_O)` are shared; each candidate has its own inner stream, so
/// every estimate equals the single-candidate call with the same seed.
pub fn estimate_rewards(
    model: &dyn TabularModel,
    x: &[f64],
    mask: &[bool],
    cands: &[usize],
    config: &SaiaConfig,
    seed: u64,
) -> Result<Vec<RewardEstimate>> {
    let schema = model.schema();
    let d = schema.width();
    let t = schema.target();
    if x.len() != d || mask.len() != d {
        return Err(Error::shape("estimate_reward", &[&[x.len()], &[mask.len()], &[d]]));
    }
    let mut m = mask.to_vec();
    m[t] = false;
    validate_row(schema, x, &m)?;
    for &i in cands {
        if i >= d {
            return Err(Error::InvalidArgument(format!("candidate {i} out of range 0..{d}")));
        }
        if i == t {
            return Err(Error::InvalidArgument(format!("candidate {i} is the target")));
        }
        if m[i] {
            return Err(Error::InvalidArgument(format!("candidate {i} is already observed")));
        }
    }
    let (s_n, t_n) = (config.outer_samples.max(1), config.inner_samples.max(1));
    let outer_seed = derive_seed(seed, &[0x31]);
    let draws = model.conditional_sample(x, &m, s_n, &mut rng::seeded(outer_seed))?;
    let has_z = !draws[0].z.is_empty();
    let elems = |dr: &Draw, c: usize| cell_elements(model, t, c, dr.x[c], has_z.then(|| dr.z[c]));
    let base: Vec<Vec<Element>> = draws
        .iter()
        .map(|dr| (0..d).filter(|&c| m[c]).flat_map(|c| elems(dr, c)).collect())
        .collect();
    let q_o = model.partial_posterior(&base)?;
    let l = model.latent();

    let mut out = Vec::with_capacity(cands.len());
    for &i in cands {
        let inner_seed = derive_seed(seed, &[0x32, i as u64]);
        let mut irng = rng::seeded(inner_seed);
        let with_i: Vec<Vec<Element>> = draws.iter().zip(&base).map(|(dr, b)| extend(b, elems(dr, i))).collect();
        let q_oi = model.partial_posterior(&with_i)?;

        let mut hv = Vec::with_capacity(s_n * t_n * l);
        for s in 0..s_n {
            for _ in 0..t_n {
                hv.extend(q_oi.sample(s, &mut irng));
            }
        }
        let mut inner = model.decode_h(&Tensor::matrix(s_n * t_n, l, hv)?, &mut irng)?;
        for (j, dr) in inner.iter_mut().enumerate() {
            let src = &draws[j / t_n];
            for c in (0..d).filter(|&c| m[c] || c == i) {
                dr.x[c] = src.x[c];
                if has_z {
                    dr.z[c] = src.z[c];
                }
            }
        }
        let phi: Vec<(f64, f64)> = match model.discriminator() {
            Some(disc) => {
                let o = disc.output_for(&inner)?;
                let w = o.cols();
                (0..inner.len())
                    .map(|j| (disc.head.sample(&o.values()[j * w..(j + 1) * w], &mut irng), 0.0))
                    .collect()
            }
            None => inner.iter().map(|dr| (dr.x[t], if has_z { dr.z[t] } else { 0.0 })).collect(),
        };
        let mut rows_a = Vec::with_capacity(s_n * t_n);
        let mut rows_b = Vec::with_capacity(s_n * t_n);
        for (j, &(xp, zp)) in phi.iter().enumerate() {
            let pe = cell_elements(model, t, t, xp, has_z.then_some(zp));
            rows_a.push(extend(&base[j / t_n], pe.clone()));
            rows_b.push(extend(&with_i[j / t_n], pe));
        }
        let qa = model.partial_posterior(&rows_a)?;
        let qb = model.partial_posterior(&rows_b)?;

        let mut total = 0.0;
        for s in 0..s_n {
            let kl1 = kl_diag(q_oi.mean(s), q_oi.logvar(s), q_o.mean(s), q_o.logvar(s));
            let kl2: f64 = (0..t_n)
                .map(|k| {
                    let j = s * t_n + k;
                    kl_diag(qb.mean(j), qb.logvar(j), qa.mean(j), qa.logvar(j))
                })
                .sum::<f64>()
                / t_n as f64;
            total += kl1 - kl2;
        }
        out.push(RewardEstimate {
            candidate: i,
            reward: total / s_n as f64,
            outer_samples: s_n,
            inner_samples: t_n,
            outer_seed,
            inner_seed,
        });
    }
    Ok(out)
}

/// Index of the largest value, first one on ties.
fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// One global acquisition order: at every step the candidate with the
/// highest reward averaged over the test rows, given each row's cells
/// acquired so far.
pub fn sing_ordering(model: &dyn TabularModel, data: &Dataset, config: &SaiaConfig, seed: u64) -> Result<Vec<usize>> {
    check_schema(model, data)?;
    let d = data.width();
    let mut remaining = candidates(model);
    let mut acquired = vec![false; d];
    let mut order = Vec::with_capacity(remaining.len());
    let mut step = 0u64;
    while !remaining.is_empty() {
        if remaining.len() == 1 {
            order.push(remaining.remove(0));
            break;
        }
        let mut totals = vec![0.0; remaining.len()];
        let mut counts = vec![0usize; remaining.len()];
        for r in 0..data.rows() {
            let mask: Vec<bool> = (0..d).map(|c| acquired[c] && data.observed(r, c)).collect();
            let (idx, cands): (Vec<usize>, Vec<usize>) =
                remaining.iter().enumerate().filter(|(_, &c)| data.observed(r, c)).map(|(k, &c)| (k, c)).unzip();
            if cands.is_empty() {
                continue;
            }
            let ests = estimate_rewards(model, data.row(r), &mask, &cands, config, derive_seed(seed, &[step, r as u64]))?;
            for (k, e) in idx.into_iter().zip(ests) {
                totals[k] += e.reward;
                counts[k] += 1;
            }
        }
        let avg: Vec<f64> = totals
            .iter()
            .zip(&counts)
            .map(|(&s, &n)| if n == 0 { f64::NEG_INFINITY } else { s / n as f64 })
            .collect();
        let pick = remaining.remove(first_max(&avg));
        log::debug!("sing step {step}: acquire column {pick}");
        acquired[pick] = true;
        order.push(pick);
        step += 1;
    }
    Ok(order)
}

pub fn random_ordering(model: &dyn TabularModel, seed: u64) -> Vec<usize> {
    let mut order = candidates(model);
    order.shuffle(&mut rng::stream(seed, &[0x33]));
    order
}

fn check_schema(model: &dyn TabularModel, data: &Dataset) -> Result<()> {
    if model.schema().columns != data.schema.columns {
        return Err(Error::Schema("dataset schema differs from the model".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InformationCurve {
    pub steps: Vec<usize>,
    /// Target RMSE in raw units; `rmse[k]` follows `order[..k]`.
    pub rmse: Vec<f64>,
    pub order: Vec<usize>,
    pub seed: u64,
}

/// Raw-unit value without clamping, so prediction errors keep their size.
fn raw_units(spec: &ColumnSpec, v: f64) -> f64 {
    match spec.kind {
        ColumnKind::Continuous | ColumnKind::DiscreteContinuous { .. } => spec.min + v * (spec.max - spec.min),
        _ => v,
    }
}

/// Reveals `order` one column at a time and records the target RMSE over
/// rows whose target is present. Predictions are seeded by the revealed set,
/// so revealing an already revealed column changes nothing.
pub fn information_curve(
    model: &dyn TabularModel,
    data: &Dataset,
    order: &[usize],
    mc_samples: usize,
    seed: u64,
) -> Result<InformationCurve> {
    check_schema(model, data)?;
    let d = data.width();
    let t = data.schema.target();
    if let Some(&bad) = order.iter().find(|&&c| c >= d || c == t) {
        return Err(Error::InvalidArgument(format!("column {bad} cannot be acquired")));
    }
    let rows: Vec<usize> = (0..data.rows()).filter(|&r| data.observed(r, t)).collect();
    if rows.is_empty() {
        return Err(Error::NoObservedCells(data.schema.columns[t].name.clone()));
    }
    let spec = &data.schema.columns[t];
    let mut revealed = vec![false; d];
    let mut rmse = Vec::with_capacity(order.len() + 1);
    for step in 0..=order.len() {
        if step > 0 {
            revealed[order[step - 1]] = true;
        }
        let key: Vec<u64> = (0..d).filter(|&c| revealed[c]).map(|c| c as u64).collect();
        let mut sq = 0.0;
        for &r in &rows {
            let mask: Vec<bool> = (0..d).map(|c| revealed[c] && data.observed(r, c)).collect();
            let mut tags = vec![0x41, r as u64];
            tags.extend(&key);
            let pred = predict_target(model, data.row(r), &mask, mc_samples, &mut rng::stream(seed, &tags))?;
            let e = raw_units(spec, pred.point) - raw_units(spec, data.get(r, t));
            sq += e * e;
        }
        rmse.push((sq / rows.len() as f64).sqrt());
    }
    Ok(InformationCurve {
        steps: (0..=order.len()).collect(),
        rmse,
        order: order.to_vec(),
        seed,
    })
}

/// Trapezoidal area with unit spacing.
pub fn auic(curve: &InformationCurve) -> Result<f64> {
    auic_values(&curve.rmse)
}

pub fn auic_values(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("a curve needs at least two points".into()));
    }
    Ok(values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum())
}

/// Divides each AUIC by their mean.
pub fn normalize_auics(values: &[f64]) -> Result<Vec<f64>> {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    if values.is_empty() || mean == 0.0 || !mean.is_finite() {
        return Err(Error::InvalidArgument("AUIC normalization needs a finite nonzero mean".into()));
    }
    Ok(values.iter().map(|v| v / mean).collect())
}

/// JSON shape of a finished SAIA run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub steps: Vec<usize>,
    pub rmse: Vec<f64>,
    pub order: Vec<usize>,
    pub auic: f64,
    pub seed: u64,
}

impl CurveReport {
    pub fn new(curve: InformationCurve) -> Result<Self> {
        let auic = auic(&curve)?;
        Ok(CurveReport {
            steps: curve.steps,
            rmse: curve.rmse,
            order: curve.order,
            auic,
            seed: curve.seed,
        })
    }
}
