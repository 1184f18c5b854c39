//! Named learnable tensors with gradient buffers and optimizer moments.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether an entry is optimized or only carried along (batch-norm running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub moment1: Tensor,
    pub moment2: Tensor,
    pub kind: EntryKind,
}

impl ParamEntry {
    fn new(value: Tensor, kind: EntryKind) -> Self {
        let shape = value.shape().to_vec();
        Self {
            grad: Tensor::zeros(&shape),
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            value,
            kind,
        }
    }
}

/// Ordered map from parameter name to its value, gradient and Adam moments.
///
/// Iteration order is the lexicographic order of names, which keeps checkpoints
/// and optimizer sweeps reproducible.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, kind: EntryKind) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Parameter(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(value, kind));
        Ok(())
    }

    /// Glorot-uniform weight `[d_in x d_out]`.
    pub fn insert_glorot(
        &mut self,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(&[d_in, d_out], data)?, EntryKind::Trainable)
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    /// Replaces a value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.value.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "`{name}` has shape {:?}, got {:?}",
                e.value.shape(),
                value.shape()
            )));
        }
        e.value = value;
        Ok(())
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, e)| e.kind == EntryKind::Trainable)
            .map(|(k, _)| k.to_string())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar trainable values.
    pub fn num_trainable(&self) -> usize {
        self.iter()
            .filter(|(_, e)| e.kind == EntryKind::Trainable)
            .map(|(_, e)| e.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]), EntryKind::Trainable).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[2]), EntryKind::Trainable).is_err());
    }

    #[test]
    fn glorot_bounds_and_zero_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.insert_glorot("w", 10, 20, &mut rng).unwrap();
        let e = s.get("w").unwrap();
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(e.value.data().iter().all(|v| v.abs() <= bound));
        assert!(e.moment1.data().iter().all(|&v| v == 0.0));
        assert!(e.moment2.data().iter().all(|&v| v == 0.0));
        assert_eq!(e.grad.shape(), e.value.shape());
    }

    #[test]
    fn set_value_checks_shape() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(&[3]), EntryKind::Buffer).unwrap();
        assert!(s.set_value("b", Tensor::zeros(&[4])).is_err());
        assert!(s.set_value("b", Tensor::filled(&[3], 1.0)).is_ok());
        assert!(s.trainable_names().is_empty());
    }
}
