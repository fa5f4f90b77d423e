use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named parameters in lexicographic order, each with a frozen flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Param { tensor, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.get_mut(name)?.frozen = frozen;
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.frozen).map(|(n, _)| n).collect()
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| !p.frozen).map(|(n, _)| n).collect()
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// SHA-256 of one tensor's shape and data bytes, hex encoded.
    pub fn tensor_hash(&self, name: &str) -> Result<String> {
        Ok(hash_tensor(&self.get(name)?.tensor))
    }

    /// Hashes of every currently frozen tensor.
    pub fn frozen_hashes(&self) -> BTreeMap<String, String> {
        self.iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, p)| (n.to_string(), hash_tensor(&p.tensor)))
            .collect()
    }

    /// Hash over all names, flags, shapes and data; a stable checkpoint id.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            h.update([p.frozen as u8]);
            for d in p.tensor.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            h.update(p.tensor.data_bytes());
        }
        hex(&h.finalize())
    }
}

pub fn hash_tensor(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u32).to_le_bytes());
    }
    h.update(t.data_bytes());
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
