use std::collections::{BTreeMap, HashMap};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }
}

/// A tape plus lazily bound parameters.
///
/// Each parameter becomes a leaf the first time a layer asks for it. Names
/// matching a frozen prefix, or every name when gradients are disabled, are
/// bound as constants so backward never visits their subgraphs.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamSet,
    bound: HashMap<String, Var>,
    frozen: Vec<String>,
    grad_enabled: bool,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
            frozen: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A session that records no parameter gradients.
    pub fn inference(params: &'p ParamSet) -> Self {
        let mut s = Self::new(params);
        s.grad_enabled = false;
        s
    }

    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn trainable(&self, name: &str) -> bool {
        self.grad_enabled && !self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.require(name)?.clone();
        let v = self.tape.leaf(value, self.trainable(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of `loss` for every trainable parameter that was bound.
    ///
    /// Parameters that were bound but received no gradient get zeros.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let mut grads = self.tape.backward(loss)?;
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            if !self.tape.requires_grad(v) {
                continue;
            }
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.tape.shape(v)));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_prefix_is_constant() {
        let mut ps = ParamSet::new();
        ps.insert("encoder.w", Tensor::full(&[2], 2.0));
        ps.insert("head.w", Tensor::full(&[2], 3.0));
        let mut s = Session::new(&ps);
        s.freeze_prefix("encoder.");
        let a = s.param("encoder.w").unwrap();
        let b = s.param("head.w").unwrap();
        assert_eq!(s.param("head.w").unwrap(), b);
        let p = s.tape.mul(a, b).unwrap();
        let l = s.tape.sum(p);
        let g = s.backward(l).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g["head.w"].data(), &[2.0, 2.0]);
        assert!(s.param("missing").is_err());
    }
}
