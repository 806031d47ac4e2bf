//! Named learnable parameters with gradient and optimizer state.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One learnable tensor. Gradient and Adam moments always share its shape.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let (r, c) = value.shape();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            adam_m: Tensor::zeros(r, c),
            adam_v: Tensor::zeros(r, c),
        }
    }
}

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

/// Flat, insertion-ordered collection of parameters. Ordering is part of the
/// determinism contract: checkpoints and optimizer sweeps iterate in
/// insertion order, never in hash order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn grad_mut_by_index(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot of all values, in insertion order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Restore values captured by [`ParamStore::snapshot`].
    pub fn restore(&mut self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::Validation("snapshot size mismatch".into()));
        }
        for (p, t) in self.params.iter_mut().zip(snapshot) {
            if p.value.shape() != t.shape() {
                return Err(Error::Validation(format!("snapshot shape mismatch for `{}`", p.name)));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Serialized form of one parameter tensor inside a checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrite values from a checkpoint. Every stored parameter must be
    /// present with a matching shape, and no extras are allowed.
    pub fn load_named_tensors(&mut self, tensors: Vec<NamedTensor>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.params.len(),
                tensors.len()
            )));
        }
        for nt in tensors {
            let Some(&idx) = self.by_name.get(&nt.name) else {
                return Err(Error::Checkpoint(format!("unknown parameter `{}`", nt.name)));
            };
            let p = &mut self.params[idx];
            if p.value.shape() != (nt.rows, nt.cols) {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{}`: model {:?}, checkpoint ({}, {})",
                    nt.name,
                    p.value.shape(),
                    nt.rows,
                    nt.cols
                )));
            }
            p.value = Tensor::from_vec(nt.rows, nt.cols, nt.data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(2, 3)).unwrap();
        assert_eq!(store.id("w"), Some(id));
        assert!(store.add("w", Tensor::zeros(1, 1)).is_err());
        assert_eq!(store.get(id).grad.shape(), (2, 3));
        assert_eq!(store.coord_count(), 6);
    }

    #[test]
    fn named_tensor_round_trip() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::from_vec(1, 2, vec![1.5, -2.25]).unwrap()).unwrap();
        store.add("b", Tensor::scalar(0.1)).unwrap();
        let dump = store.to_named_tensors();
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(1, 2)).unwrap();
        other.add("b", Tensor::zeros(1, 1)).unwrap();
        other.load_named_tensors(dump).unwrap();
        assert_eq!(other.get(other.id("a").unwrap()).value.data(), &[1.5, -2.25]);
    }
}
