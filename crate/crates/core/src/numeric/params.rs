use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    frozen: bool,
}

/// Named parameter tensors with per-parameter freeze flags.
///
/// Names are slash-separated (`reasoner/layer0/wq`, `stage2/expert1/layer3/up/a`).
/// A frozen parameter never appears in a gradient map and can never be
/// registered with an optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access; refused for frozen parameters.
    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        let p = &mut self.params[id.0];
        if p.frozen {
            return Err(Error::Invariant(format!(
                "attempt to mutate frozen parameter {}",
                p.name
            )));
        }
        Ok(&mut p.value)
    }

    /// Replaces a parameter's value wholesale (checkpoint loading). Shape must match.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        ensure!(
            p.value.shape() == value.shape(),
            "shape mismatch assigning {}: {:?} vs {:?}",
            p.name,
            p.value.shape(),
            value.shape()
        );
        if p.frozen {
            return Err(Error::Invariant(format!(
                "attempt to overwrite frozen parameter {}",
                p.name
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.params[id.0].frozen = true;
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.by_name
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(_, &id)| id)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    /// Sum of squared entries over the given parameters.
    pub fn sq_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter().fold(0.0, |acc, &id| acc + self.get(id).sq_norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_params_refuse_mutation() {
        let mut store = ParamStore::new();
        let id = store.insert("a", Tensor::zeros(&[2])).unwrap();
        store.freeze(id);
        assert!(store.get_mut(id).is_err());
        assert!(store.assign(id, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn prefix_lookup_is_ordered() {
        let mut store = ParamStore::new();
        store.insert("s1/b", Tensor::zeros(&[1])).unwrap();
        store.insert("s1/a", Tensor::zeros(&[1])).unwrap();
        store.insert("s2/a", Tensor::zeros(&[1])).unwrap();
        let ids = store.ids_with_prefix("s1/");
        let names: Vec<_> = ids.iter().map(|&i| store.name(i)).collect();
        assert_eq!(names, vec!["s1/a", "s1/b"]);
    }
}
