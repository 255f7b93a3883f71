use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels;
use super::params::{ParamId, ParamSet};
use super::tape::{Bound, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn on_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    fn in_place(self, xs: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => xs.iter_mut().for_each(|x| *x = kernels::relu(*x)),
            Activation::Sigmoid => xs.iter_mut().for_each(|x| *x = kernels::sigmoid(*x)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Glorot-uniform weights, zero biases.
    Glorot,
    /// Weights and biases uniform in `±1/√fan_in`.
    FanIn,
    /// Every weight and bias zero.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = match init {
            Init::Zero => Tensor::zeros(fan_in, fan_out),
            Init::Glorot => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let values = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Tensor::from_parts(fan_in, fan_out, values)
            }
            Init::FanIn => {
                let limit = 1.0 / (fan_in as f64).sqrt();
                let values = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Tensor::from_parts(fan_in, fan_out, values)
            }
        };
        let b = match init {
            Init::FanIn => {
                let limit = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_parts(1, fan_out, (0..fan_out).map(|_| rng.random_range(-limit..limit)).collect())
            }
            _ => Tensor::zeros(1, fan_out),
        };
        let w = params.add(format!("{name}.w"), w);
        let b = params.add(format!("{name}.b"), b);
        Dense {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.get(self.w))?;
        tape.add(h, bound.get(self.b))
    }

    pub fn infer(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let (m, k) = x.dims("matmul")?;
        let w = params.value(self.w);
        if k != w.rows() {
            return Err(Error::shape("matmul", &[x.shape(), w.shape()]));
        }
        let mut out = kernels::matmul(x.values(), w.values(), m, k, w.cols());
        kernels::add_row(&mut out, params.value(self.b).values());
        Ok(Tensor::from_parts(m, w.cols(), out))
    }
}

/// Fully connected stack: ReLU between layers, `output` after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        sizes: &[usize],
        output: Activation,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, &format!("{name}.{i}"), w[0], w[1], init, rng))
            .collect();
        Mlp { layers, output }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, bound, h)?;
            let act = if i == last { self.output } else { Activation::Relu };
            h = act.on_tape(tape, h)?;
        }
        Ok(h)
    }

    pub fn infer(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.infer(params, &h)?;
            let act = if i == last { self.output } else { Activation::Relu };
            act.in_place(h.values_mut());
        }
        Ok(h)
    }
}
