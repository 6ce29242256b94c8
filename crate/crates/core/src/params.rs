//! Named parameter storage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Every learnable array, keyed by a dotted path such as
/// `layers.3.mamba.in_proj.weight`. Ordered, so iteration and
/// serialization are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new array. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("parameter `{name}` registered twice")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    /// Inserts or overwrites.
    pub fn set(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Scalars in entries whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Moves every entry of `other` into `self`; duplicates are an error.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.entries {
            self.insert(k, v)?;
        }
        Ok(())
    }

    /// Copies entries from `src` whose names also exist here. Every matched
    /// entry must agree in shape; the first mismatch is reported by path.
    /// Returns the number of entries copied.
    pub fn load_matching(&mut self, src: &ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        for (name, dst) in self.entries.iter_mut().filter(|(k, _)| filter(k)) {
            match src.get(name) {
                Some(t) if t.shape() == dst.shape() => {
                    *dst = t.clone();
                    copied += 1;
                }
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch at `{name}`: checkpoint {:?}, model {:?}",
                        t.shape(),
                        dst.shape()
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))
                }
            }
        }
        Ok(copied)
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}
