//! Named parameter storage and graph binding.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a stable
//! hierarchical name (`family/layer/role`). The same names appear in
//! checkpoints, so warmstart can reason about which entries cross a
//! schema change.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Ordered name -> tensor map. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    /// He-style init: `N(0, 2 / fan_in)` entries drawn from a stream keyed
    /// by `(seed, name)`, so adding a parameter never reshuffles others.
    pub fn insert_he(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, seed: u64) {
        let name = name.into();
        let mut rng = Rng::stream(seed, &format!("param/{name}"));
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::randn(shape, std, &mut rng);
        self.insert(name, t);
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i]),
            None => Err(Error::contract(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterate in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    /// FNV-1a digest over names, shapes, and raw little-endian values.
    pub fn digest(&self) -> u64 {
        let mut h = crate::hash::Fnv1a::new();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            h.write(&[0]);
            for d in t.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Parameters bound into a graph as leaves (trainable or frozen).
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Bind every parameter as a trainable leaf.
    pub fn trainable(g: &mut Graph, store: &ParamStore) -> BoundParams {
        let vars = store
            .iter()
            .map(|(n, t)| (n.to_string(), g.param(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Bind every parameter as a frozen leaf (inference).
    pub fn frozen(g: &mut Graph, store: &ParamStore) -> BoundParams {
        let vars = store
            .iter()
            .map(|(n, t)| (n.to_string(), g.constant(t.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("unbound parameter {name}")))
    }

    /// Collect gradients back out of the graph, aligned with `store` order.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .names()
            .iter()
            .map(|n| self.vars.get(n).and_then(|v| g.grad(*v).cloned()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insertion_order_preserved() {
        let mut s = ParamStore::new();
        s.insert_zeros("b/x", vec![1]);
        s.insert_zeros("a/y", vec![1]);
        let names: Vec<&str> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b/x", "a/y"]);
    }

    #[test]
    fn he_init_is_per_name_deterministic() {
        let mut a = ParamStore::new();
        a.insert_he("w", vec![3, 3], 3, 42);
        let mut b = ParamStore::new();
        b.insert_he("other", vec![2, 2], 2, 42); // extra param first
        b.insert_he("w", vec![3, 3], 3, 42);
        assert_eq!(a.get("w").unwrap(), b.get("w").unwrap());
    }

    #[test]
    fn digest_changes_with_values() {
        let mut s = ParamStore::new();
        s.insert_zeros("w", vec![2]);
        let d0 = s.digest();
        s.get_mut("w").unwrap().data_mut()[0] = 1.0;
        assert_ne!(d0, s.digest());
    }
}
