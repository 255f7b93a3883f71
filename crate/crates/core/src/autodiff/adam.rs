use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_lr(params, 1e-3)
    }

    pub fn with_lr(params: &ParamSet, lr: f64) -> Self {
        let zeros = |p: &ParamSet| -> Vec<Tensor> {
            p.ids()
                .map(|id| Tensor::zeros(p.value(id).rows(), p.value(id).cols()))
                .collect()
        };
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the accumulated gradients, which are then zeroed.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        if !params.grads_finite() {
            params.zero_grads();
            return Err(Error::NonFinite("gradients".into()));
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let (value, grad) = params.value_and_grad_mut(id);
            let m = self.m[i].values_mut();
            let v = self.v[i].values_mut();
            for j in 0..grad.len() {
                let g = grad.values()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                value.values_mut()[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            grad.values_mut().fill(0.0);
        }
        if !params.values_finite() {
            return Err(Error::NonFinite("parameters after optimizer step".into()));
        }
        Ok(())
    }
}
