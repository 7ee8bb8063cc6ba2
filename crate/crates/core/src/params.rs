//! Named trainable and frozen parameters.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Parameters keyed by dotted path, e.g. `layer.1.ffn_up.router.W_g`.
///
/// Iteration is always in lexicographic path order, so two stores built
/// from the same configuration visit parameters identically.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    names: Vec<String>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        path: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        let path = path.into();
        if self.index.contains_key(&path) {
            return Err(Error::Invalid(format!("duplicate parameter path {path:?}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            value: Arc::new(value),
            grad: None,
            trainable,
        });
        self.names.push(path.clone());
        self.index.insert(path, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, path: &str) -> Result<ParamId> {
        self.index
            .get(path)
            .copied()
            .ok_or_else(|| Error::UnknownParam(path.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn shared_value(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.value.same_shape(&value) {
            return Err(Error::Shape {
                op: "ParamStore::set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access to the values of one parameter (copy-on-write).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Adds `g` into the gradient slot of a trainable parameter.
    /// Gradients offered to frozen parameters are dropped.
    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return Ok(());
        }
        if !p.value.same_shape(g) {
            return Err(Error::Shape {
                op: "accumulate_grad",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        match &mut p.grad {
            Some(acc) => acc.add_assign(g),
            None => p.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Parameter ids in path order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.index.values().copied()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> + '_ {
        self.index
            .iter()
            .map(move |(name, id)| (name.as_str(), &self.params[id.0]))
    }

    /// Number of scalar coordinates across trainable parameters.
    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Path → value snapshot, in path order.
    pub fn records(&self) -> BTreeMap<String, Tensor> {
        self.iter()
            .map(|(name, p)| (name.to_string(), (*p.value).clone()))
            .collect()
    }

    /// Overwrites values from a record map. Every path must already exist
    /// with the same shape; records with unknown paths are returned.
    pub fn load_records(&mut self, records: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let mut unknown = Vec::new();
        for (path, t) in records {
            match self.index.get(path) {
                Some(&id) => self.set_value(id, t.clone())?,
                None => unknown.push(path.clone()),
            }
        }
        Ok(unknown)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_path_ordered_and_paths_unique() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(1, 1), true).unwrap();
        s.insert("a", Tensor::zeros(1, 2), false).unwrap();
        assert!(s.insert("a", Tensor::zeros(1, 1), true).is_err());
        let names: Vec<_> = s.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(s.trainable_ids(), vec![s.id("b").unwrap()]);
    }

    #[test]
    fn frozen_params_never_collect_grads() {
        let mut s = ParamStore::new();
        let f = s.insert("w0", Tensor::zeros(1, 1), false).unwrap();
        s.accumulate_grad(f, &Tensor::scalar(1.0)).unwrap();
        assert!(s.grad(f).is_none());
    }
}
