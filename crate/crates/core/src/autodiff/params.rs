use std::collections::BTreeMap;

use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in sorted name order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.params.values().collect()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copy of the set registered as fresh leaves on `tape`.
    pub fn attach(&self, tape: &Tape) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v)))
                .collect(),
        }
    }

    pub fn detach(&self) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.detach()))
                .collect(),
        }
    }

    /// Build a new set by mapping every `(name, tensor)` pair.
    pub fn try_map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ParamSet> {
        let mut params = BTreeMap::new();
        for (k, v) in &self.params {
            params.insert(k.clone(), f(k, v)?);
        }
        Ok(ParamSet { params })
    }

    /// Pair each parameter with the gradient at the same sorted position.
    pub fn zip_map(
        &self,
        grads: &[Tensor],
        mut f: impl FnMut(&str, &Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<ParamSet> {
        if grads.len() != self.len() {
            return Err(Error::Data(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.len()
            )));
        }
        let mut params = BTreeMap::new();
        for ((k, v), g) in self.params.iter().zip(grads) {
            if v.shape() != g.shape() {
                return Err(Error::shape("zip_map", &[v.shape(), g.shape()]));
            }
            params.insert(k.clone(), f(k, v, g)?);
        }
        Ok(ParamSet { params })
    }

    /// Flattened values in sorted name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`], keeping names and shapes.
    pub fn unflatten(&self, values: &[f64]) -> Result<ParamSet> {
        if values.len() != self.num_scalars() {
            return Err(Error::Data(format!(
                "{} values for {} scalars",
                values.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        self.try_map(|_, t| {
            let n = t.numel();
            let out = Tensor::new(t.shape(), values[offset..offset + n].to_vec());
            offset += n;
            out
        })
    }

    /// Merge with `other`, prefixing every name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Subset whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }
}
