//! Named parameter collections shared between model code, the optimizer,
//! and checkpoints.

use std::path::Path;

use super::checkpoint;
use super::graph::{Graph, Value};
use super::tensor::Tensor;
use super::DiffError;

/// An ordered collection of uniquely named trainable tensors. Iteration
/// order is insertion order and is part of the determinism contract (the
/// optimizer walks parameters in this order).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`; it is forced to require gradients.
    pub fn add(&mut self, name: &str, t: Tensor) -> Result<(), DiffError> {
        if self.index_of(name).is_some() {
            return Err(DiffError::Format { what: format!("duplicate parameter name '{name}'") });
        }
        self.entries.push((name.to_string(), t.with_grad()));
        Ok(())
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Records every parameter as a leaf on `g`, returning handles for this
    /// step's computation.
    pub fn bind(&self, g: &Graph) -> Result<BoundParams, DiffError> {
        let mut pairs = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            pairs.push((name.clone(), g.leaf(t)?));
        }
        Ok(BoundParams { pairs })
    }

    /// Replaces a parameter's data in place (shape must match).
    pub fn set_data(&mut self, name: &str, data: &[f64]) -> Result<(), DiffError> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| DiffError::Format { what: format!("unknown parameter '{name}'") })?;
        if t.numel() != data.len() {
            return Err(DiffError::BadShape {
                what: format!("parameter '{name}' has {} elements, got {}", t.numel(), data.len()),
            });
        }
        t.data.copy_from_slice(data);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.zero_grad();
        }
    }

    /// Saves all parameters to a checkpoint archive (entries sorted by name).
    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        let entries: Vec<(&str, &Tensor)> =
            self.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        checkpoint::write_archive(path, &entries)
    }

    /// Loads parameter data from an archive. Every parameter in `self` must
    /// be present with a matching shape; extra archive entries are returned
    /// for the caller to interpret (e.g. optimizer state).
    pub fn load(&mut self, path: &Path) -> Result<Vec<(String, Tensor)>, DiffError> {
        let archive = checkpoint::read_archive(path)?;
        let mut extra = Vec::new();
        let mut seen = vec![false; self.entries.len()];
        for (name, tensor) in archive {
            match self.index_of(&name) {
                Some(i) => {
                    if self.entries[i].1.shape != tensor.shape {
                        return Err(DiffError::Format {
                            what: format!(
                                "checkpoint entry '{name}' has shape {:?}, expected {:?}",
                                tensor.shape, self.entries[i].1.shape
                            ),
                        });
                    }
                    self.entries[i].1.data = tensor.data;
                    seen[i] = true;
                }
                None => extra.push((name, tensor)),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(DiffError::Format {
                what: format!("checkpoint is missing parameter '{}'", self.entries[i].0),
            });
        }
        Ok(extra)
    }
}

/// Per-step leaf handles for every parameter of a [`ParamSet`].
pub struct BoundParams {
    pairs: Vec<(String, Value)>,
}

impl BoundParams {
    /// Binds an explicit name→value list (e.g. to run a model on values that
    /// came from somewhere other than a [`ParamSet`], as gradient-checking
    /// tests do).
    pub fn from_pairs(pairs: Vec<(String, Value)>) -> Self {
        BoundParams { pairs }
    }

    pub fn value(&self, name: &str) -> Option<&Value> {
        self.pairs.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    /// Leaf handle for `name`; errors if the parameter does not exist.
    pub fn req(&self, name: &str) -> Result<&Value, DiffError> {
        self.value(name)
            .ok_or_else(|| DiffError::Format { what: format!("unknown parameter '{name}'") })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Value)> {
        self.pairs.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Copies accumulated leaf gradients back into the parameter tensors
    /// (adding to whatever is already stored there).
    pub fn write_grads(&self, params: &mut ParamSet) -> Result<(), DiffError> {
        for (name, value) in &self.pairs {
            if let Some(g) = value.grad() {
                let t = params.get_mut(name).ok_or_else(|| DiffError::Format {
                    what: format!("unknown parameter '{name}'"),
                })?;
                t.accumulate_grad(&g.data);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(ps.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn bind_backward_absorb() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_vec(vec![2.0, 3.0])).unwrap();
        let g = Graph::new();
        let bound = ps.bind(&g).unwrap();
        let w = bound.req("w").unwrap();
        let loss = w.square().unwrap().sum().unwrap();
        loss.backward().unwrap();
        bound.write_grads(&mut ps).unwrap();
        assert_eq!(ps.get("w").unwrap().grad.as_ref().unwrap(), &vec![4.0, 6.0]);
        ps.zero_grads();
        assert_eq!(ps.get("w").unwrap().grad.as_ref().unwrap(), &vec![0.0, 0.0]);
    }

    #[test]
    fn num_scalars_counts_elements() {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[3, 4])).unwrap();
        ps.add("b", Tensor::zeros(&[5])).unwrap();
        assert_eq!(ps.num_scalars(), 17);
    }
}
