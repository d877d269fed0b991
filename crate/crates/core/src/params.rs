//! Named, ordered collections of weight tensors.
//!
//! A `ParamSet` is the unit of communication between clients and the
//! server: encoder weights, predictor weights and control variates are
//! all param sets. Entries keep their insertion order so that iteration
//! (and therefore every arithmetic fold) is deterministic.

use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        debug_assert!(
            self.get(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total element count across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Pairwise combination; the two sets must have identical names,
    /// order and shapes.
    pub fn zip_map(
        &self,
        other: &ParamSet,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<ParamSet, TensorError> {
        if self.len() != other.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "param sets have {} vs {} tensors",
                self.len(),
                other.len()
            )));
        }
        let mut out = ParamSet::new();
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(TensorError::ShapeMismatch(format!(
                    "param name mismatch: {na} vs {nb}"
                )));
            }
            out.insert(na.clone(), ta.zip(tb, &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map(&f)))
                .collect(),
        }
    }

    /// `self + scale * other`, elementwise across matching tensors.
    pub fn axpy(&self, scale: f64, other: &ParamSet) -> Result<ParamSet, TensorError> {
        self.zip_map(other, |a, b| a + scale * b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, s: f64) -> ParamSet {
        self.map(|v| v * s)
    }

    /// Largest absolute difference across all entries; the sets must match.
    pub fn max_abs_diff(&self, other: &ParamSet) -> Result<f64, TensorError> {
        let mut worst = 0.0f64;
        let d = self.sub(other)?;
        for (_, t) in d.iter() {
            for v in t.data() {
                worst = worst.max(v.abs());
            }
        }
        Ok(worst)
    }

    /// Prefix every name, e.g. `weight` -> `encoder.weight`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
                .collect(),
        }
    }

    /// Keep only entries whose name starts with `prefix`, stripping it.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// Merge two sets; duplicate names are a logic error.
    pub fn merged(&self, other: &ParamSet) -> ParamSet {
        let mut out = self.clone();
        for (n, t) in other.iter() {
            out.insert(n, t.clone());
        }
        out
    }

    /// Stable content hash over names, shapes and exact f64 bits. Used by
    /// tests to assert that parameters did not move.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        };
        for (n, t) in self.iter() {
            for b in n.as_bytes() {
                mix(*b);
            }
            for &e in t.shape() {
                for b in (e as u64).to_le_bytes() {
                    mix(b);
                }
            }
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    mix(b);
                }
            }
        }
        h
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            entries: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(pairs: &[(&str, &[f64])]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, d) in pairs {
            p.insert(*n, Tensor::from_vec(vec![d.len()], d.to_vec()).unwrap());
        }
        p
    }

    #[test]
    fn zip_map_requires_matching_names() {
        let a = ps(&[("w", &[1.0])]);
        let b = ps(&[("v", &[1.0])]);
        assert!(a.zip_map(&b, |x, y| x + y).is_err());
    }

    #[test]
    fn axpy_folds_pairwise() {
        let a = ps(&[("w", &[1.0, 2.0])]);
        let b = ps(&[("w", &[10.0, 20.0])]);
        let c = a.axpy(0.5, &b).unwrap();
        assert_eq!(c.get("w").unwrap().data(), &[6.0, 12.0]);
    }

    #[test]
    fn content_hash_sensitive_to_bits() {
        let a = ps(&[("w", &[0.0])]);
        let b = ps(&[("w", &[-0.0])]);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), a.clone().content_hash());
    }
}
