use std::collections::BTreeMap;

use super::tape::Var;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    entries: BTreeMap<String, Entry>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name, Entry { value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub(crate) fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.grad)
    }

    /// Overwrites gradient buffers by name; names not in `grads` are zeroed.
    pub fn set_grads(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            match grads.get(name) {
                Some(g) if g.shape() == e.value.shape() => e.grad = g.clone(),
                Some(g) => return Err(Error::shape("set_grads", e.value.shape(), g.shape())),
                None => e.grad.data_mut().iter_mut().for_each(|v| *v = 0.0),
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn zero_grad(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> Params {
        Params {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: Params) -> Result<()> {
        for (k, e) in other.entries {
            if self.entries.contains_key(&k) {
                return Err(Error::Contract(format!("duplicate parameter {k}")));
            }
            self.entries.insert(k, e);
        }
        Ok(())
    }

    /// FNV-1a over names, shapes, and value bits; used to detect mutation.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::config::Fnv1a::new();
        for (k, e) in &self.entries {
            h.write(k.as_bytes());
            for d in e.value.shape() {
                h.write(&(*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Tape handles for a bound parameter set.
#[derive(Debug, Clone)]
pub struct ParamVars<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    pub(crate) fn new(vars: BTreeMap<String, Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
    }

    /// Adds the handles of `other`; later bindings win on collision.
    pub fn merge(mut self, other: ParamVars<'t>) -> Self {
        self.vars.extend(other.vars);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut p = Params::new();
        p.insert("b", Tensor::zeros([1])).unwrap();
        p.insert("a", Tensor::zeros([2])).unwrap();
        assert!(p.insert("a", Tensor::zeros([1])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(p.grad("a").unwrap().shape(), &[2]);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut p = Params::new();
        p.insert("w", Tensor::zeros([3])).unwrap();
        let before = p.checksum();
        p.get_mut("w").unwrap().data_mut()[1] = 1e-300;
        assert_ne!(before, p.checksum());
    }
}
