use std::collections::BTreeMap;

use fnv::FnvHasher;
use std::hash::Hasher;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Named parameters with deterministic (lexicographic) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet<T: Real> {
    tensors: BTreeMap<String, Tensor<T>>,
}

pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

impl<T: Real> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Multiplies every parameter by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let s = T::from_f64_lossy(c);
        ParameterSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.map(|x| x * s))).collect(),
        }
    }

    /// FNV-1a digest over names, shapes and little-endian payloads.
    pub fn digest(&self) -> u64 {
        let mut h = FnvHasher::default();
        for (name, t) in &self.tensors {
            h.write(name.as_bytes());
            h.write_u64(tensor_digest(t));
        }
        h.finish()
    }

    /// Records every parameter as a graph leaf. Frozen bindings never
    /// receive gradients.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), graph.leaf(v.clone(), trainable)))
                .collect(),
            trainable,
            graph,
        }
    }
}

pub fn tensor_digest<T: Real>(t: &Tensor<T>) -> u64 {
    let mut h = FnvHasher::default();
    for d in t.shape() {
        h.write_u32(*d as u32);
    }
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    T::to_le_bytes_vec(t.data(), &mut bytes);
    h.write(&bytes);
    h.finish()
}

/// Parameters recorded in a specific graph.
pub struct Bound<'g, T: Real> {
    vars: BTreeMap<String, Var<'g, T>>,
    trainable: bool,
    graph: &'g Graph<T>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Swaps in another variable for `name` (used to differentiate with
    /// respect to externally created leaves).
    pub fn replace(&mut self, name: &str, var: Var<'g, T>) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
        if slot.shape() != var.shape() {
            return Err(Error::shape("replace", &slot.shape(), &var.shape()));
        }
        *slot = var;
        Ok(())
    }

    /// Gradient of the scalar `loss` for every bound parameter.
    pub fn grad(&self, loss: Var<'g, T>) -> Result<Gradients<T>> {
        if !self.trainable {
            return Err(Error::invalid("grad requested for frozen parameters"));
        }
        let names: Vec<&String> = self.vars.keys().collect();
        let vars: Vec<Var<'g, T>> = self.vars.values().copied().collect();
        let grads = self.graph.grad(loss, &vars, false)?;
        Ok(names
            .into_iter()
            .zip(grads)
            .map(|(n, g)| (n.clone(), g.value().as_ref().clone()))
            .collect())
    }
}
