use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
///
/// Names are slash-separated paths such as `attention/dpeg/head/wq`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        tensor.set_requires_grad(true);
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    /// Glorot-style uniform initialisation for a `[fan_in, fan_out]` weight.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.insert_uniform(name, &[fan_in, fan_out], bound, rng)
    }

    pub fn insert_const(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, value))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose path starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids()
            .filter(move |&id| self.names[id.0].starts_with(prefix))
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds the leaf gradients recorded on `graph` into the store.
    pub fn absorb_grads(&mut self, graph: &Graph) -> Result<()> {
        for (id, g) in graph.param_leaves() {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Concatenated gradient of `ids`, zeros where no gradient was recorded.
    pub fn flat_grad(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            let t = &self.tensors[id.0];
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    pub fn to_map(&self) -> BTreeMap<String, StoredTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), StoredTensor::from(t)))
            .collect()
    }

    /// Overwrites values from a checkpoint map; every parameter must be present.
    pub fn load_map(&mut self, map: &BTreeMap<String, StoredTensor>) -> Result<()> {
        let mut missing = Vec::new();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            match map.get(name) {
                Some(s) if s.shape == t.shape() && s.data.len() == t.numel() => {
                    t.data_mut().copy_from_slice(&s.data);
                }
                Some(s) => missing.push(format!(
                    "{name}: stored shape {:?} differs from {:?}",
                    s.shape,
                    t.shape()
                )),
                None => missing.push(format!("{name}: missing")),
            }
        }
        if let Some(extra) = map.keys().find(|k| !self.lookup.contains_key(*k)) {
            missing.push(format!("{extra}: unknown parameter"));
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "checkpoint does not match the model: {}",
                missing.join(", ")
            )))
        }
    }
}

/// Serialised form of a parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for StoredTensor {
    fn from(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }
}
