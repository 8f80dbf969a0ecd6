use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result, Scalar};

/// Index into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named leaf tensor. `trainable` is the tensor's `requires_grad` flag.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn set_trainable(&self, on: bool) {
        self.tensor.set_requires_grad(on);
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Named parameter registry. Names are unique; iteration is lexicographic by
/// name regardless of insertion order.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        if !tensor.is_leaf() {
            return Err(Error::contract(format!("parameter `{name}` must be a leaf tensor")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Parameters in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> + '_ {
        self.index.values().map(move |&i| &self.params[i])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> + '_ {
        self.index.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(Parameter::numel).sum()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> + '_ {
        self.iter().filter(|p| p.trainable())
    }

    pub fn freeze_all(&self) {
        for p in &self.params {
            p.set_trainable(false);
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// `(name, shape)` pairs in name order; two stores with equal structure
    /// describe the same inference graph inputs.
    pub fn structure(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|p| (p.name.clone(), p.tensor.shape().to_vec())).collect()
    }

    /// Independent copy of every value, keeping trainable flags.
    pub fn deep_clone(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.deep_clone(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn clear(&mut self) {
        self.params.clear();
        self.index.clear();
    }
}

/// Glob match supporting `*` (any run of characters, including dots).
pub fn glob_match(pattern: &str, name: &str) -> bool {
    let (p, n) = (pattern.as_bytes(), name.as_bytes());
    let (mut pi, mut ni) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while ni < n.len() {
        if pi < p.len() && p[pi] == b'*' {
            star = Some((pi, ni));
            pi += 1;
        } else if pi < p.len() && p[pi] == n[ni] {
            pi += 1;
            ni += 1;
        } else if let Some((sp, sn)) = star {
            pi = sp + 1;
            ni = sn + 1;
            star = Some((sp, sn + 1));
        } else {
            return false;
        }
    }
    p[pi..].iter().all(|&c| c == b'*')
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn names_are_unique_and_iteration_is_sorted() {
        let mut store = ParamStore::<f32>::new();
        store.insert("b.weight", Tensor::zeros(&[2])).unwrap();
        store.insert("a.bias", Tensor::zeros(&[3])).unwrap();
        assert!(store.insert("a.bias", Tensor::zeros(&[1])).is_err());
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, vec!["a.bias", "b.weight"]);
        assert_eq!(store.numel(), 5);
    }

    #[test]
    fn globbing() {
        assert!(glob_match("*.bias", "layer.0.attn.q.bias"));
        assert!(!glob_match("*.bias", "layer.0.attn.q.weight"));
        assert!(glob_match("layer.1.*", "layer.1.ff.fc1.weight"));
        assert!(!glob_match("layer.1.*", "layer.10.ff.fc1.weight"));
        assert!(glob_match("*", "anything"));
        assert!(glob_match("layer.*.attn.*.weight", "layer.3.attn.v.weight"));
    }
}
