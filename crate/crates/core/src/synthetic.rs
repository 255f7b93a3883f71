//! Small generated datasets with known structure.

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};

use crate::data::{ColumnSpec, Dataset, Schema};
use crate::error::Result;
use crate::rng;

fn full(schema: Schema, rows: usize, cells: Vec<f64>) -> Result<Dataset> {
    let mask = vec![true; cells.len()];
    Dataset::new(schema, rows, cells, mask)
}

/// `driver` determines the target exactly; `noise` is independent of both.
pub fn deterministic(rows: usize, seed: u64) -> Result<Dataset> {
    let schema = Schema::new(
        vec![
            ColumnSpec::continuous("driver", 0.0, 1.0),
            ColumnSpec::continuous("noise", 0.0, 1.0),
            ColumnSpec::continuous("target", 0.0, 1.0).target(),
        ],
        false,
    )?;
    let mut rng = rng::stream(seed, &[0x51]);
    let mut cells = Vec::with_capacity(rows * 3);
    for _ in 0..rows {
        let a: f64 = rng.random();
        let b: f64 = rng.random();
        cells.extend([a, b, a]);
    }
    full(schema, rows, cells)
}

/// Joint over three binary variables `(a, b, target)`: `a` and `b`
/// independent, the target Bernoulli given both.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryJoint {
    pub p_a: f64,
    pub p_b: f64,
    /// `P(target = 1 | a, b)` indexed `[a][b]`.
    pub p_target: [[f64; 2]; 2],
}

impl Default for BinaryJoint {
    fn default() -> Self {
        BinaryJoint {
            p_a: 0.5,
            p_b: 0.35,
            p_target: [[0.05, 0.4], [0.7, 0.97]],
        }
    }
}

impl BinaryJoint {
    pub fn prob(&self, a: usize, b: usize, t: usize) -> f64 {
        let pa = if a == 1 { self.p_a } else { 1.0 - self.p_a };
        let pb = if b == 1 { self.p_b } else { 1.0 - self.p_b };
        let pt = self.p_target[a][b];
        pa * pb * if t == 1 { pt } else { 1.0 - pt }
    }

    pub fn schema() -> Result<Schema> {
        Schema::new(
            vec![
                ColumnSpec::categorical("a", &["0", "1"]),
                ColumnSpec::categorical("b", &["0", "1"]),
                ColumnSpec::categorical("target", &["0", "1"]).target(),
            ],
            false,
        )
    }

    pub fn sample(&self, rows: usize, seed: u64) -> Result<Dataset> {
        let mut rng = rng::stream(seed, &[0x52]);
        let mut cells = Vec::with_capacity(rows * 3);
        for _ in 0..rows {
            let a = (rng.random::<f64>() < self.p_a) as usize;
            let b = (rng.random::<f64>() < self.p_b) as usize;
            let t = (rng.random::<f64>() < self.p_target[a][b]) as usize;
            cells.extend([a as f64, b as f64, t as f64]);
        }
        full(Self::schema()?, rows, cells)
    }
}

/// Eight columns covering every kind: bimodal, skewed and uniform
/// continuous, two categoricals, an ordinal, a gridded column and a target
/// that depends on several of them.
pub fn mixed(rows: usize, seed: u64) -> Result<Dataset> {
    let grid: Vec<f64> = (0..6).map(|k| k as f64 * 2.0).collect();
    let schema = Schema::new(
        vec![
            ColumnSpec::continuous("bimodal", 0.0, 1.0),
            ColumnSpec::continuous("skewed", 0.0, 1.0),
            ColumnSpec::continuous("uniform", 0.0, 1.0),
            ColumnSpec::categorical("colour", &["blue", "green", "red"]),
            ColumnSpec::categorical("flag", &["no", "yes"]),
            ColumnSpec::ordinal("grade", &["low", "mid", "high", "top"]),
            ColumnSpec::discrete_continuous("count", &grid),
            ColumnSpec::continuous("target", 0.0, 1.0).target(),
        ],
        false,
    )?;
    let mut rng = rng::stream(seed, &[0x53]);
    let narrow = Normal::<f64>::new(0.0, 0.05).expect("valid normal");
    let exp = Exp::<f64>::new(6.0).expect("valid rate");
    let mut cells = Vec::with_capacity(rows * 8);
    for _ in 0..rows {
        let mode = rng.random::<f64>() < 0.4;
        let bimodal = ((if mode { 0.25 } else { 0.7 }) + narrow.sample(&mut rng)).clamp(0.0, 1.0);
        let skewed = exp.sample(&mut rng).min(1.0);
        let uniform: f64 = rng.random();
        let colour = if mode { rng.random_range(0..2) } else { rng.random_range(1..3) } as f64;
        let flag = (rng.random::<f64>() < 0.3 + 0.4 * uniform) as usize as f64;
        let grade = ((uniform * 4.0).floor().min(3.0) + if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 }).min(3.0);
        let count = rng.random_range(0..6) as f64 / 5.0;
        let target = (0.3 * bimodal + 0.4 * uniform + 0.2 * skewed + 0.1 * flag + narrow.sample(&mut rng) * 0.2)
            .clamp(0.0, 1.0);
        cells.extend([bimodal, skewed, uniform, colour, flag, grade, count, target]);
    }
    full(schema, rows, cells)
}
