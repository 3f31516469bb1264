use std::collections::{BTreeMap, HashMap};

use crate::autograd::{Graph, Var};

use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
///
/// Names are dotted paths whose leading segment is the parameter group
/// (`backbone`, `relation`, `scale_attn`, `fusion`); decoder heads are keyed
/// by way count and use two segments, e.g. `decoder.n2`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

pub fn group_of(name: &str) -> &str {
    let mut parts = name.splitn(3, '.');
    let first = parts.next().unwrap_or(name);
    if first == "decoder" {
        match parts.next() {
            Some(head) => &name[..first.len() + 1 + head.len()],
            None => first,
        }
    } else {
        first
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.map.keys().map(|k| group_of(k).to_string()).collect();
        g.dedup();
        g
    }

    /// Parameters whose group is `group`.
    pub fn group(&self, group: &str) -> ParamStore {
        ParamStore {
            map: self
                .map
                .iter()
                .filter(|(k, _)| group_of(k) == group)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.map.extend(other.map);
    }

    /// Shape manifest: `(name, shape)` pairs in name order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.map {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            h.update((v.shape().len() as u64).to_le_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Lazily lifts parameters from a store into a [`Graph`], once per name.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            vars: Default::default(),
            trainable,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let t = self.store.get(name).clone();
        let v = if self.trainable { g.param(t) } else { g.constant(t) };
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn try_var(&mut self, g: &mut Graph, name: &str) -> Option<Var> {
        self.store.contains(name).then(|| self.var(g, name))
    }

    /// Bound `(name, var)` pairs, in name order.
    pub fn bound(&self) -> Vec<(String, Var)> {
        let mut v: Vec<_> = self.vars.iter().map(|(k, v)| (k.clone(), *v)).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_names() {
        assert_eq!(group_of("backbone.stage1.weight"), "backbone");
        assert_eq!(group_of("decoder.n2.conv_in.weight"), "decoder.n2");
        assert_eq!(group_of("relation"), "relation");
    }

    #[test]
    fn hash_detects_sign_of_zero() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::from_vec(&[1], vec![0.0]));
        let mut b = ParamStore::new();
        b.insert("x", Tensor::from_vec(&[1], vec![-0.0]));
        assert_ne!(a.hash_hex(), b.hash_hex());
    }
}
