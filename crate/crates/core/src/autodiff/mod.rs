//! Reverse-mode automatic differentiation over rank-2 `f64` tensors.

mod adam;
mod gradcheck;
pub mod kernels;
mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::gradient_check;
pub use nn::{Activation, Dense, Init, Mlp};
pub use params::{ParamId, ParamSet, ParamSpec};
pub use tape::{Bound, OpKind, Tape, Var};
pub use tensor::Tensor;

/// Slot layout for [`Tape::set_feature_map`].
///
/// Row `b` of the output aggregates `slots` entries; entry `b * slots + s`
/// reads row `table_row` of the embedding table scaled by `mult`, and is
/// skipped when `active` is false.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SetBatch {
    pub rows: usize,
    pub slots: usize,
    pub table_row: Vec<u32>,
    pub mult: Vec<f64>,
    pub active: Vec<bool>,
}

impl SetBatch {
    pub fn new(rows: usize, slots: usize) -> Self {
        let n = rows * slots;
        SetBatch {
            rows,
            slots,
            table_row: vec![0; n],
            mult: vec![0.0; n],
            active: vec![false; n],
        }
    }

    pub fn set(&mut self, row: usize, slot: usize, table_row: usize, mult: f64) {
        let i = row * self.slots + slot;
        self.table_row[i] = table_row as u32;
        self.mult[i] = mult;
        self.active[i] = true;
    }

    pub(crate) fn is_consistent(&self) -> bool {
        let n = self.rows * self.slots;
        self.table_row.len() == n && self.mult.len() == n && self.active.len() == n
    }
}
