//! Named parameter tensors with matching gradient slots.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParameterSet {
    arch: String,
    config_hash: String,
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    grads_filled: bool,
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.config_hash == other.config_hash
            && self.names == other.names
            && self.values == other.values
    }
}

impl ParameterSet {
    pub fn new(arch: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            arch: arch.into(),
            config_hash: config_hash.into(),
            names: Vec::new(),
            index: HashMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
            grads_filled: false,
        }
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn set_identity(&mut self, arch: impl Into<String>, config_hash: impl Into<String>) {
        self.arch = arch.into();
        self.config_hash = config_hash.into();
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(())
    }

    /// Replaces the value of an existing tensor; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = self.index_of(name)?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}` has shape {:?}, new value has {:?}",
                self.values[i].shape(),
                value.shape()
            )));
        }
        self.values[i] = value;
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| invalid!("no parameter named `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.values[self.index_of(name)?])
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.grads[self.index_of(name)?])
    }

    pub fn value_at(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn grad_at(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
        self.grads_filled = false;
    }

    /// Whether a backward pass has written into the gradient slots since the
    /// last [`zero_grads`](Self::zero_grads).
    pub fn grads_filled(&self) -> bool {
        self.grads_filled
    }

    /// Adds gradients produced by a graph bound to this set.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.param_len != self.len() {
            return Err(invalid!(
                "gradients were computed for a set of {} tensors, this set has {}",
                grads.param_len,
                self.len()
            ));
        }
        for (i, g) in &grads.entries {
            let slot = self.grads[*i].data_mut();
            if slot.len() != g.len() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has {} values, expected {}",
                    self.names[*i],
                    g.len(),
                    slot.len()
                )));
            }
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
        self.grads_filled = true;
        Ok(())
    }

    pub fn scale_grads(&mut self, factor: f32) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradients of one backward pass, keyed by parameter position.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) param_len: usize,
    pub(crate) entries: Vec<(usize, Vec<f32>)>,
}

impl Gradients {
    pub fn get(&self, index: usize) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|(i, _)| *i == index)
            .map(|(_, g)| g.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_slots_match() {
        let mut p = ParameterSet::new("toy", "h");
        p.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.grad("w").unwrap().shape(), &[2, 3]);
        assert!(p.set("w", Tensor::zeros(&[3, 2])).is_err());
        assert_eq!(p.param_count(), 6);
    }

    #[test]
    fn hash_tracks_values() {
        let mut p = ParameterSet::new("toy", "h");
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        let before = p.content_hash();
        p.set("w", Tensor::filled(&[2], 1.0)).unwrap();
        assert_ne!(before, p.content_hash());
    }
}
