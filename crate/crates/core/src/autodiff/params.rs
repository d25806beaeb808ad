use ndarray::Array2;

use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable leaf with its gradient accumulator and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let shape = value.raw_dim();
        Parameter {
            name: name.into(),
            value,
            grad: Array2::zeros(shape),
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }
}

/// Ordered registry of every parameter in a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `grads[i]` into parameter `i`'s accumulator.
    pub fn accumulate(&mut self, grads: &[Option<Array2<f64>>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.grad += g;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values (and optimizer state) from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.len(),
                other.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    dst.name,
                    dst.shape(),
                    src.name,
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}
