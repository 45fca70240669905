use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Named parameter tensors; iteration and the flat view follow name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.entries.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Concatenation of every entry in name order.
    pub fn flat_view(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a set with this set's layout from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "flat vector of {} values for a set of {}",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.entries {
            let n = t.len();
            entries.insert(name.clone(), Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { entries })
    }

    /// Same names, order and shapes.
    pub fn compatible_with(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.compatible_with(other) {
            Ok(())
        } else {
            Err(Error::Aggregation(format!(
                "incompatible parameter sets: [{}] vs [{}]",
                self.layout(),
                other.layout()
            )))
        }
    }

    fn layout(&self) -> String {
        self.entries
            .iter()
            .map(|(n, t)| format!("{n}{:?}", t.shape()))
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect(),
        }
    }

    /// Merge `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.entries {
            self.entries.insert(format!("{prefix}.{k}"), v.clone());
        }
    }

    /// Entries under `prefix.` with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let p = format!("{prefix}.");
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self { entries: iter.into_iter().collect() }
    }
}
