//! Named parameter storage and its binding into a gradient graph.

use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Ordered map of parameter name to tensor. Names are dotted paths whose first
/// segment identifies the owning component (`lm`, `adapter`, `pool`, `lora`,
/// `soft`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Parameters whose component prefix is `component`.
    pub fn component<'a>(&'a self, component: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> {
        self.iter().filter(move |(n, _)| component_of(n) == component)
    }

    pub fn numel(&self, component: &str) -> usize {
        self.component(component).map(|(_, t)| t.numel()).sum()
    }

    /// Moves every parameter of `other` into `self`, replacing equal names.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn retain_components(&mut self, keep: &[&str]) {
        self.tensors.retain(|n, _| keep.contains(&component_of(n)));
    }

    /// FNV-1a over names, shapes and raw bits of the given component.
    pub fn fingerprint(&self, component: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, t) in self.component(component) {
            eat(name.as_bytes());
            for d in t.shape() {
                eat(&(*d as u64).to_le_bytes());
            }
            for x in t.data() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

pub fn component_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// A graph together with lazily bound parameters.
///
/// Each parameter becomes a leaf the first time it is requested; leaves of
/// components listed as trainable require gradients.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    trainable: Vec<String>,
    bound: HashMap<String, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, trainable: &[&str]) -> Self {
        Self {
            graph: Graph::new(),
            store,
            trainable: trainable.iter().map(|s| s.to_string()).collect(),
            bound: HashMap::new(),
        }
    }

    /// Session where nothing requires gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::new(store, &[])
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|c| c == component_of(name))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.graph.leaf(t, self.is_trainable(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self) -> IndexMap<String, Vec<f64>> {
        let mut out: IndexMap<String, Vec<f64>> = self
            .bound
            .iter()
            .filter_map(|(n, &v)| self.graph.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect();
        // HashMap iteration order is unspecified; keep store order
        out.sort_by_cached_key(|n, _| self.store.tensors.get_index_of(n));
        out
    }

    /// Gradient for one bound parameter; zeros when it is bound but unreached.
    pub fn grad_of(&self, name: &str) -> Option<Vec<f64>> {
        let &v = self.bound.get(name)?;
        Some(
            self.graph
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; self.graph.value(v).numel()]),
        )
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}
