use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    value: Tensor4<T>,
    grad: Tensor4<T>,
    frozen: bool,
}

/// Named learnable tensors with a gradient buffer each. Registration order is
/// stable and doubles as the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        self.entries.push(Entry {
            grad: Tensor4::zeros(value.shape()),
            name,
            value,
            frozen: false,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor4<T> {
        &mut self.entries[id.0].value
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor4<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: e.name.clone(),
                expected: e.value.shape(),
                found: value.shape(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor4<T> {
        &self.entries[id.0].grad
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor4<T>) -> Result<()> {
        self.entries[id.0].grad.add_assign(g)?;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(T::zero());
        }
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut count = 0;
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.frozen = true;
            count += 1;
        }
        count
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].value.shape()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.shape().len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor4<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::<f32>::new();
        let a = s.insert("a", Tensor4::zeros([1, 1, 1, 2])).unwrap();
        let b = s.insert("b", Tensor4::zeros([1, 1, 1, 3])).unwrap();
        assert!(s.insert("a", Tensor4::zeros([1, 1, 1, 1])).is_err());
        assert_eq!(s.id("b").unwrap(), b);
        assert_eq!(s.ids().collect::<Vec<_>>(), vec![a, b]);
        assert_eq!(s.num_scalars(), 5);
        assert!(matches!(s.set_value(a, Tensor4::zeros([1, 1, 1, 3])), Err(Error::ParamShape { .. })));
    }

    #[test]
    fn freeze_by_prefix() {
        let mut s = ParamStore::<f64>::new();
        s.insert("backbone.stem.w", Tensor4::zeros([1, 1, 1, 1])).unwrap();
        let h = s.insert("head.w", Tensor4::zeros([1, 1, 1, 1])).unwrap();
        assert_eq!(s.freeze_prefix("backbone."), 1);
        assert!(!s.is_frozen(h));
    }
}
