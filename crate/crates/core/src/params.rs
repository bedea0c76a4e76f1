//! Ordered collection of named parameter tensors.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name `{name}`")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.names.len() - 1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.position(name) {
            Some(i) => Ok(&mut self.tensors[i]),
            None => Err(Error::Checkpoint(format!("missing tensor `{name}`"))),
        }
    }

    pub fn at(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `graph` as a leaf, in insertion order.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Vec<NodeId> {
        self.tensors.iter().map(|t| graph.leaf(t.clone(), trainable)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Moves every tensor of `other` into `self`.
    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for (name, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(name, t)?;
        }
        Ok(())
    }

    /// The subset whose names start with `prefix`, in order.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if n.starts_with(prefix) {
                out.insert(n, t.clone()).expect("names are unique");
            }
        }
        out
    }
}
