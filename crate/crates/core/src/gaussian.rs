//! Diagonal Gaussian helpers, on the tape and in plain `f64`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::Result;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn log_normal(x: f64, mean: f64, logvar: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + logvar + d * d * (-logvar).exp())
}

pub fn log_normal_diag(x: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(logvar)
        .fold(0.0, |acc, ((&x, &m), &lv)| acc + log_normal(x, m, lv))
}

/// `KL(N(m1, e^lv1) || N(m2, e^lv2))` summed over dimensions.
pub fn kl_diag(m1: &[f64], lv1: &[f64], m2: &[f64], lv2: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m1.len() {
        let d = m1[i] - m2[i];
        acc += 0.5 * (lv2[i] - lv1[i] + (lv1[i] - lv2[i]).exp_m1() + d * d * (-lv2[i]).exp());
    }
    acc
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn std_normals<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| std_normal(rng)).collect()
}

/// Reparameterized draw `mean + exp(logvar / 2) * eps`.
pub fn reparam(tape: &mut Tape, mean: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul(sd, eps)?;
    tape.add(mean, noise)
}

/// Row-wise `log N(x; mean, exp(logvar))` summed over columns, giving `B×1`.
/// `logvar` may be a `1×D` row shared by all rows.
pub fn log_normal_rows(tape: &mut Tape, x: Var, mean: Var, logvar: Var) -> Result<Var> {
    let d = tape.sub(x, mean)?;
    let sq = tape.square(d)?;
    let neg = tape.neg(logvar)?;
    let prec = tape.exp(neg)?;
    let quad = tape.mul(sq, prec)?;
    let with_lv = tape.add(quad, logvar)?;
    let per = tape.offset(with_lv, LN_2PI)?;
    let s = tape.sum_cols(per)?;
    tape.scale(s, -0.5)
}

/// Row-wise `log N(mean + sd * eps; mean, sd^2)` which only depends on `logvar` and `eps`.
pub fn log_q_reparam_rows(tape: &mut Tape, logvar: Var, eps: &[f64], rows: usize) -> Result<Var> {
    let cols = eps.len() / rows.max(1);
    let e2 = tape.constant(crate::autodiff::Tensor::matrix(rows, cols, eps.iter().map(|e| e * e).collect())?);
    let with_lv = tape.add(e2, logvar)?;
    let per = tape.offset(with_lv, LN_2PI)?;
    let s = tape.sum_cols(per)?;
    tape.scale(s, -0.5)
}

/// Row-wise `KL(N(mean, e^logvar) || N(0, I))`, giving `B×1`.
pub fn kl_std_normal_rows(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Var> {
    let m2 = tape.square(mean)?;
    let v = tape.exp(logvar)?;
    let a = tape.add(m2, v)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.offset(b, -1.0)?;
    let s = tape.sum_cols(c)?;
    tape.scale(s, 0.5)
}
