//! Named parameter storage shared by every model in the workspace.
//!
//! Parameters are registered once under a dotted path ("decoder.block0.wq"),
//! keep a stable [`ParamId`], and can be frozen by prefix. Frozen parameters
//! enter graphs as constants, so no gradient ever reaches them; hashing a
//! prefix before and after training is the freeze contract used in tests.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::graph::{Gradients, Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
    frozen: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new(), frozen: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, tensor: Tensor<S>) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.frozen.push(false);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<S>) {
        assert_eq!(self.tensors[id.0].shape(), tensor.shape(), "parameter shape is fixed at registration");
        self.tensors[id.0] = tensor;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for i in 0..self.names.len() {
            if self.names[i].starts_with(prefix) {
                self.frozen[i] = true;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| !self.is_frozen(id)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// SHA-256 over (name, shape, f64 bit patterns) of every parameter under
    /// the prefix, in registration order. Bit-identical params, same hash.
    pub fn hash_prefix(&self, prefix: &str) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for id in self.ids() {
            if !self.names[id.0].starts_with(prefix) {
                continue;
            }
            hasher.update(self.names[id.0].as_bytes());
            hasher.update([0u8]);
            for &d in self.tensors[id.0].shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in self.tensors[id.0].data() {
                hasher.update(v.to_f64_c().to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// Per-graph lazy binding of parameters to tape nodes. Trainable params bind
/// as leaves, frozen ones as constants.
pub struct Binding {
    nodes: Vec<Option<NodeId>>,
}

impl Binding {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        Binding { nodes: vec![None; store.len()] }
    }

    pub fn node<S: Scalar>(&mut self, g: &mut Graph<S>, store: &ParamStore<S>, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let t = store.get(id).clone();
        let n = if store.is_frozen(id) { g.constant(t) } else { g.leaf(t) };
        self.nodes[id.0] = Some(n);
        n
    }

    /// Route a parameter to an existing node instead of its stored value.
    /// Gradient checks use this to substitute perturbed leaves.
    pub fn node_override(&mut self, id: ParamId, node: NodeId) {
        self.nodes[id.0] = Some(node);
    }

    /// Gradients for every trainable parameter bound into this graph, in
    /// ascending ParamId order, zero-filled where the loss never reached.
    pub fn collect<S: Scalar>(&self, grads: &Gradients<S>, store: &ParamStore<S>) -> Vec<(ParamId, Tensor<S>)> {
        let mut out = Vec::new();
        for (i, slot) in self.nodes.iter().enumerate() {
            let id = ParamId(i);
            if store.is_frozen(id) {
                continue;
            }
            if let Some(n) = slot {
                out.push((id, grads.get_or_zeros(*n, store.get(id).shape())));
            }
        }
        out
    }
}

/// Dense gradient accumulator for batches built as one graph per sample.
/// Accumulation order is ascending ParamId, so sums are reproducible.
pub struct GradAccum<S> {
    sums: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradAccum<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        GradAccum { sums: (0..store.len()).map(|_| None).collect() }
    }

    pub fn add(&mut self, grads: &[(ParamId, Tensor<S>)]) {
        for (id, g) in grads {
            match &mut self.sums[id.0] {
                Some(acc) => {
                    let dst = acc.data_mut();
                    for (d, s) in dst.iter_mut().zip(g.data().iter()) {
                        *d = *d + *s;
                    }
                }
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    /// Mean over `count` samples, ascending ParamId order.
    pub fn finalize(self, count: usize) -> Vec<(ParamId, Tensor<S>)> {
        let inv = S::from_f64_c(1.0 / count as f64);
        self.sums
            .into_iter()
            .enumerate()
            .filter_map(|(i, t)| t.map(|t| (ParamId(i), t.map(|v| v * inv))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_find_and_names() {
        let mut s: ParamStore<f32> = ParamStore::new();
        let a = s.register("enc.w", Tensor::zeros(&[2, 2]));
        let b = s.register("dec.w", Tensor::zeros(&[3]));
        assert_eq!(s.find("enc.w"), Some(a));
        assert_eq!(s.find("missing"), None);
        assert_eq!(s.name(b), "dec.w");
        assert_eq!(s.len(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.register("w", Tensor::zeros(&[1]));
        s.register("w", Tensor::zeros(&[1]));
    }

    #[test]
    fn freeze_prefix_blocks_gradients() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let enc = s.register("enc.w", Tensor::scalar(2.0));
        let dec = s.register("dec.w", Tensor::scalar(3.0));
        s.freeze_prefix("enc.");

        let mut g = Graph::new();
        let mut bind = Binding::new(&s);
        let e = bind.node(&mut g, &s, enc);
        let d = bind.node(&mut g, &s, dec);
        let prod = g.mul(e, d).unwrap();
        let loss = g.mean_all(prod).unwrap();
        let grads = g.backward(loss).unwrap();

        let collected = bind.collect(&grads, &s);
        assert_eq!(collected.len(), 1);
        assert_eq!(collected[0].0, dec);
        assert!((collected[0].1.data()[0] - 2.0).abs() < 1e-12);
        assert!(grads.get(e).is_none());
    }

    #[test]
    fn unused_trainable_param_collects_zeros() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let used = s.register("a", Tensor::scalar(2.0));
        let unused = s.register("b", Tensor::scalar(5.0));
        let mut g = Graph::new();
        let mut bind = Binding::new(&s);
        let u = bind.node(&mut g, &s, used);
        let _nu = bind.node(&mut g, &s, unused);
        let sq = g.mul(u, u).unwrap();
        let loss = g.mean_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let collected = bind.collect(&grads, &s);
        assert_eq!(collected.len(), 2);
        assert_eq!(collected[1].0, unused);
        assert_eq!(collected[1].1.data(), &[0.0]);
    }

    #[test]
    fn hash_changes_with_values_and_prefix_scopes() {
        let mut s: ParamStore<f32> = ParamStore::new();
        let w = s.register("enc.w", Tensor::scalar(1.0));
        s.register("dec.w", Tensor::scalar(1.0));
        let h0 = s.hash_prefix("enc.");
        let hall = s.hash_prefix("");
        s.set(w, Tensor::scalar(1.5));
        assert_ne!(h0, s.hash_prefix("enc."));
        assert_ne!(hall, s.hash_prefix(""));
        // dec untouched
        let mut s2: ParamStore<f32> = ParamStore::new();
        s2.register("dec.w", Tensor::scalar(1.0));
        // prefix hash only covers its own params, names included
        assert_eq!(s.hash_prefix("dec."), s2.hash_prefix("dec."));
    }

    #[test]
    fn grad_accum_means_over_samples() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let p = s.register("w", Tensor::scalar(0.0));
        let mut acc = GradAccum::new(&s);
        acc.add(&[(p, Tensor::scalar(1.0))]);
        acc.add(&[(p, Tensor::scalar(3.0))]);
        let out = acc.finalize(2);
        assert_eq!(out.len(), 1);
        assert!((out[0].1.data()[0] - 2.0).abs() < 1e-12);
    }
}
