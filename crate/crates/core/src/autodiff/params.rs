use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Serialized form of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named tensors with matching gradient accumulators.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(grad);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &mut Tensor) {
        (&mut self.values[id.0], &mut self.grads[id.0])
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.grads[id.0].values_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.values_mut().fill(0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    pub fn values_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    pub fn to_specs(&self) -> Vec<ParamSpec> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, t)| ParamSpec {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.values().to_vec(),
            })
            .collect()
    }

    pub fn from_specs(specs: Vec<ParamSpec>) -> Result<Self> {
        let mut set = ParamSet::new();
        for spec in specs {
            if spec.shape.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "parameter '{}' must be rank 2, got shape {:?}",
                    spec.name, spec.shape
                )));
            }
            set.add(spec.name, Tensor::new(spec.shape, spec.values)?);
        }
        Ok(set)
    }

    /// Overwrites values from `specs`, which must list the same names and shapes in order.
    pub fn load_specs(&mut self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                self.len(),
                specs.len()
            )));
        }
        for (i, spec) in specs.iter().enumerate() {
            if spec.name != self.names[i] || spec.shape != self.values[i].shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter {i}: expected '{}' {:?}, got '{}' {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    spec.name,
                    spec.shape
                )));
            }
            self.values[i] = Tensor::new(spec.shape.clone(), spec.values.clone())?;
        }
        Ok(())
    }
}

impl Serialize for ParamSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_specs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let specs = Vec::<ParamSpec>::deserialize(d)?;
        ParamSet::from_specs(specs).map_err(serde::de::Error::custom)
    }
}
