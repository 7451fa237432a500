use std::collections::HashMap;
use std::ops::Index;

use sha2::{Digest, Sha256};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Ordered set of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Merges `other` in, prefixing its names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.insert(format!("{prefix}{n}"), t.clone());
        }
    }

    /// The subset of entries under `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.iter() {
            h.update((n.len() as u64).to_le_bytes());
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundParams<'t> {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::with_capacity(self.entries.len());
        for (i, (n, t)) in self.entries.iter().enumerate() {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            vars.push(v);
            index.insert(n.clone(), i);
        }
        BoundParams { vars, index }
    }
}

/// Parameters of a [`ParamSet`] placed on a tape, addressable by name.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Option<Var<'t>> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Gradients in the same order as the source [`ParamSet`].
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

impl<'t> Index<&str> for BoundParams<'t> {
    type Output = Var<'t>;

    fn index(&self, name: &str) -> &Var<'t> {
        match self.index.get(name) {
            Some(&i) => &self.vars[i],
            None => panic!("unknown parameter `{name}`"),
        }
    }
}
