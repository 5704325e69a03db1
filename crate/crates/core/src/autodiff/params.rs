use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        value.ensure_finite(&name)?;
        let id = self.tensors.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let old = &self.tensors[id.0];
        if old.shape() != value.shape() {
            return Err(shape_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                old.shape(),
                value.shape()
            ));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Round every value to the nearest `f32`; parameters live on the f32 grid.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            *t = t.map(|v| v as f32 as f64);
        }
    }
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: store.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub(crate) fn from_vec(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sqr).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            *g = g.map(|v| v * s);
        }
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(shape_err!("gradient sets differ in length"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.shape() != b.shape() {
                return Err(shape_err!("gradient shapes differ"));
            }
            let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            *a = Tensor::from_vec_unchecked(a.shape().to_vec(), sum);
        }
        Ok(())
    }

    pub fn ensure_finite(&self, store: &ParamStore) -> Result<()> {
        for (id, g) in self.iter() {
            g.ensure_finite(&format!("grad of {}", store.name(id)))?;
        }
        Ok(())
    }
}
