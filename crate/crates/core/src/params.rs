use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered collection of trainable tensors with gradient buffers.
///
/// Each set carries a process-unique id so a graph only routes gradients
/// back to the set its parameter leaves were bound from.
#[derive(Debug)]
pub struct ParameterSet {
    id: u64,
    entries: Vec<Param>,
}

impl Clone for ParameterSet {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.clone(),
                    grad: p.grad.clone(),
                })
                .collect(),
        }
    }
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value == b.value)
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            entries: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Param { name, value, grad });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].grad)
    }

    pub fn entry(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        self.entries[idx].grad.add_assign(g)
    }

    /// Order-sensitive FNV-style fingerprint of every value bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.entries {
            for b in p.name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
            }
            for v in p.value.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_is_exact() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::filled(&[2, 2], 1.0)).unwrap();
        ps.accumulate_grad(0, &Tensor::filled(&[2, 2], 0.3)).unwrap();
        ps.zero_grads();
        assert!(ps.grad("w").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(ps.insert("w", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn clones_get_new_identity() {
        let ps = ParameterSet::new();
        assert_ne!(ps.clone().id(), ps.id());
    }
}
