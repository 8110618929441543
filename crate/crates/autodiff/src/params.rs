use std::collections::BTreeMap;

use crate::array::Array;
use crate::error::{AutodiffError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    value: Array,
    grad: Array,
    frozen: bool,
}

impl Parameter {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn grad(&self) -> &Array {
        &self.grad
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Trainable parameters keyed by a dotted path such as `encoder.gru.0.u_c`.
///
/// Iteration order is the lexicographic order of the paths, which keeps
/// serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Array) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(AutodiffError::DuplicateParameter(path));
        }
        let grad = Array::zeros(value.rows(), value.cols());
        self.entries.insert(
            path,
            Parameter {
                value,
                grad,
                frozen: false,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn get(&self, path: &str) -> Result<&Parameter> {
        self.entries
            .get(path)
            .ok_or_else(|| AutodiffError::UnknownParameter(path.to_string()))
    }

    fn get_mut(&mut self, path: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(path)
            .ok_or_else(|| AutodiffError::UnknownParameter(path.to_string()))
    }

    pub fn value(&self, path: &str) -> Result<&Array> {
        Ok(&self.get(path)?.value)
    }

    pub fn grad(&self, path: &str) -> Result<&Array> {
        Ok(&self.get(path)?.grad)
    }

    /// Replaces a value; the shape must not change.
    pub fn set_value(&mut self, path: &str, value: Array) -> Result<()> {
        let p = self.get_mut(path)?;
        if p.value.shape() != value.shape() {
            return Err(AutodiffError::Shape {
                op: "set_value",
                lhs: p.value.shape(),
                rhs: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut(&mut self, path: &str) -> Result<&mut Array> {
        Ok(&mut self.get_mut(path)?.value)
    }

    pub fn add_grad(&mut self, path: &str, grad: &Array) -> Result<()> {
        let p = self.get_mut(path)?;
        if p.grad.shape() != grad.shape() {
            return Err(AutodiffError::Shape {
                op: "add_grad",
                lhs: p.grad.shape(),
                rhs: grad.shape(),
            });
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = Array::zeros(p.value.rows(), p.value.cols());
        }
    }

    pub fn is_frozen(&self, path: &str) -> Result<bool> {
        Ok(self.get(path)?.frozen)
    }

    pub fn set_frozen(&mut self, path: &str, frozen: bool) -> Result<()> {
        self.get_mut(path)?.frozen = frozen;
        Ok(())
    }

    /// Sets the frozen flag on every path starting with `prefix`; returns how
    /// many parameters matched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for (path, p) in self.entries.iter_mut() {
            if path.starts_with(prefix) {
                p.frozen = frozen;
                n += 1;
            }
        }
        n
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }
}
