//! Permutation-invariant encoder for arbitrary observed subsets.
//!
//! Every observed element `v` with embedding `e` is mapped through a shared
//! single-layer feature map `relu(W (v e) + b)`; the mapped elements are summed
//! and a head network turns the sum into a diagonal Gaussian.

use rand::Rng as _;

use crate::autodiff::{kernels, Activation, Bound, Dense, Init, Mlp, ParamId, ParamSet, SetBatch, Tape, Tensor, Var};
use crate::dependency::HGaussian;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// One member of the observed set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Element {
    /// Normalized value (class index for discrete columns).
    X { feature: usize, value: f64 },
    /// Marginal latent.
    Z { feature: usize, value: f64 },
}

impl Element {
    fn key(&self) -> (usize, u8, f64) {
        match *self {
            Element::X { feature, value } => (feature, 0, value),
            Element::Z { feature, value } => (feature, 1, value),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialEncoder {
    cards: Vec<usize>,
    x_base: Vec<usize>,
    z_row: Option<Vec<usize>>,
    latent: usize,
    table: ParamId,
    feat_w: ParamId,
    feat_b: ParamId,
    head: Mlp,
}

impl PartialEncoder {
    /// `cards[d]` is the class count of column `d` (1 for continuous kinds);
    /// `with_z` adds a latent element per column.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        cards: &[usize],
        with_z: bool,
        embed: usize,
        features: usize,
        hidden: &[usize],
        latent: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Self {
        let mut x_base = Vec::with_capacity(cards.len());
        let mut z_row = Vec::with_capacity(cards.len());
        let mut rows = 0;
        for &c in cards {
            x_base.push(rows);
            rows += c.max(1);
            if with_z {
                z_row.push(rows);
                rows += 1;
            }
        }
        let table_init = match init {
            Init::Zero => Tensor::zeros(rows, embed),
            Init::Glorot | Init::FanIn => {
                let lim = (6.0 / (rows + embed) as f64).sqrt();
                let vals = (0..rows * embed).map(|_| rng.random_range(-lim..lim)).collect();
                Tensor::matrix(rows, embed, vals).expect("table shape")
            }
        };
        let table = params.add("embed", table_init);
        let feat = Dense::new(params, "feature", embed, features, init, rng);
        let mut sizes = vec![features];
        sizes.extend(hidden);
        sizes.push(2 * latent);
        let head = Mlp::new(params, "head", &sizes, Activation::Identity, init, rng);
        PartialEncoder {
            cards: cards.to_vec(),
            x_base,
            z_row: with_z.then_some(z_row),
            latent,
            table,
            feat_w: feat.w,
            feat_b: feat.b,
            head,
        }
    }

    pub fn width(&self) -> usize {
        self.cards.len()
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn has_z(&self) -> bool {
        self.z_row.is_some()
    }

    pub fn slots_per_row(&self) -> usize {
        if self.has_z() {
            2 * self.width()
        } else {
            self.width()
        }
    }

    /// Ids of every parameter owned by the encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.table, self.feat_w, self.feat_b];
        for l in &self.head.layers {
            ids.push(l.w);
            ids.push(l.b);
        }
        ids
    }

    pub(crate) fn slot(&self, e: Element) -> Result<(usize, f64)> {
        let d = self.width();
        let bad = |feature: usize| Error::InvalidArgument(format!("feature {feature} out of range 0..{d}"));
        match e {
            Element::X { feature, value } => {
                let card = *self.cards.get(feature).ok_or_else(|| bad(feature))?;
                if card > 1 {
                    let k = value as usize;
                    if value.fract() != 0.0 || value < 0.0 || k >= card {
                        return Err(Error::InvalidObservation {
                            field: format!("feature {feature}"),
                            reason: format!("class index {value} not in 0..{card}"),
                        });
                    }
                    Ok((self.x_base[feature] + k, 1.0))
                } else {
                    Ok((self.x_base[feature], value))
                }
            }
            Element::Z { feature, value } => {
                let rows = self
                    .z_row
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("encoder takes no latent elements".into()))?;
                let row = *rows.get(feature).ok_or_else(|| bad(feature))?;
                Ok((row, value))
            }
        }
    }

    /// Slot layout for `B×D` rows: each observed feature contributes its
    /// x-element then (with latents) its z-element, in column order.
    pub fn row_set(&self, x: &[f64], z: Option<&[f64]>, mask: &[bool]) -> Result<SetBatch> {
        let d = self.width();
        let rows = mask.len() / d.max(1);
        let per = self.slots_per_row();
        let mut set = SetBatch::new(rows, per);
        for r in 0..rows {
            for c in 0..d {
                let i = r * d + c;
                if !mask[i] {
                    continue;
                }
                let (tx, mx) = self.slot(Element::X { feature: c, value: x[i] })?;
                if let (true, Some(z)) = (self.has_z(), z) {
                    set.set(r, 2 * c, tx, mx);
                    let (tz, mz) = self.slot(Element::Z { feature: c, value: z[i] })?;
                    set.set(r, 2 * c + 1, tz, mz);
                } else if self.has_z() {
                    return Err(Error::InvalidArgument("latent values required".into()));
                } else {
                    set.set(r, c, tx, mx);
                }
            }
        }
        Ok(set)
    }

    /// Slot layout for explicit element multisets, canonically ordered.
    pub fn element_set(&self, rows: &[Vec<Element>]) -> Result<SetBatch> {
        let slots = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut set = SetBatch::new(rows.len(), slots);
        for (r, elems) in rows.iter().enumerate() {
            let mut sorted = elems.clone();
            sorted.sort_by(|a, b| {
                let (ka, kb) = (a.key(), b.key());
                ka.0.cmp(&kb.0).then(ka.1.cmp(&kb.1)).then(ka.2.total_cmp(&kb.2))
            });
            for (s, e) in sorted.into_iter().enumerate() {
                let (t, m) = self.slot(e)?;
                set.set(r, s, t, m);
            }
        }
        Ok(set)
    }

    /// Adds one element to every row of `set`.
    pub fn append(&self, set: &SetBatch, extra: &[Element]) -> Result<SetBatch> {
        if extra.len() != set.rows {
            return Err(Error::shape("append", &[&[extra.len()], &[set.rows]]));
        }
        let mut out = SetBatch::new(set.rows, set.slots + 1);
        for (r, &e) in extra.iter().enumerate() {
            for j in 0..set.slots {
                let i = r * set.slots + j;
                if set.active[i] {
                    out.set(r, j, set.table_row[i] as usize, set.mult[i]);
                }
            }
            let (t, m) = self.slot(e)?;
            out.set(r, set.slots, t, m);
        }
        Ok(out)
    }

    pub fn encode(&self, params: &ParamSet, set: &SetBatch) -> Result<HGaussian> {
        let t = params.value(self.table);
        let w = params.value(self.feat_w);
        let b = params.value(self.feat_b);
        let k = w.cols();
        if set.table_row.iter().any(|&r| r as usize >= t.rows()) {
            return Err(Error::InvalidArgument("set references unknown embedding row".into()));
        }
        let p = kernels::matmul(t.values(), w.values(), t.rows(), t.cols(), k);
        let agg = kernels::set_feature_map(&p, b.values(), set);
        let out = self.head.infer(params, &Tensor::matrix(set.rows, k, agg)?)?;
        Ok(split_gaussian(&out, self.latent))
    }

    /// `(mean, logvar)` on the tape, each `B×L`.
    pub fn encode_tape(&self, tape: &mut Tape, bound: &Bound, set: SetBatch) -> Result<(Var, Var)> {
        let p = tape.matmul(bound.get(self.table), bound.get(self.feat_w))?;
        let agg = tape.set_feature_map(p, bound.get(self.feat_b), set)?;
        let out = self.head.forward(tape, bound, agg)?;
        let l = self.latent;
        Ok((tape.slice_cols(out, 0, l)?, tape.slice_cols(out, l, 2 * l)?))
    }
}

pub fn concat_sets(a: &SetBatch, b: &SetBatch) -> SetBatch {
    let slots = a.slots.max(b.slots);
    let mut out = SetBatch::new(a.rows + b.rows, slots);
    for (off, s) in [(0, a), (a.rows, b)] {
        for r in 0..s.rows {
            for j in 0..s.slots {
                let i = r * s.slots + j;
                if s.active[i] {
                    out.set(off + r, j, s.table_row[i] as usize, s.mult[i]);
                }
            }
        }
    }
    out
}

pub(crate) fn split_gaussian(out: &Tensor, l: usize) -> HGaussian {
    let rows = out.rows();
    let mut means = Vec::with_capacity(rows * l);
    let mut lvs = Vec::with_capacity(rows * l);
    for r in 0..rows {
        let row = out.row_slice(r);
        means.extend_from_slice(&row[..l]);
        lvs.extend_from_slice(&row[l..2 * l]);
    }
    HGaussian {
        means: Tensor::matrix(rows, l, means).expect("shape"),
        logvars: Tensor::matrix(rows, l, lvs).expect("shape"),
    }
}
