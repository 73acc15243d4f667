use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named trainable grid plus its optimizer treatment.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Frozen entries enter graphs as constants and are skipped by the optimizer.
    pub trainable: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    /// A row (of a 2-D grid) that is never updated, e.g. the PAD embedding.
    pub pinned_row: Option<usize>,
}

/// Ordered collection of every parameter of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a decayed, trainable parameter.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.insert(ParamEntry {
            name: name.into(),
            value,
            trainable: true,
            decay: true,
            pinned_row: None,
        })
    }

    pub fn insert(&mut self, entry: ParamEntry<T>) -> Result<ParamId> {
        if self.by_name.contains_key(&entry.name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{}`",
                entry.name
            )));
        }
        let id = self.entries.len();
        self.by_name.insert(entry.name.clone(), id);
        self.entries.push(entry);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Same names, flags and shapes with values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                    decay: e.decay,
                    pinned_row: e.pinned_row,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Overwrite values from `(name, grid)` pairs; every stored name must be present
    /// with a matching shape.
    pub fn load_values(&mut self, values: &[(String, Tensor<T>)]) -> Result<()> {
        let incoming: HashMap<&str, &Tensor<T>> =
            values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for entry in &mut self.entries {
            let t = incoming.get(entry.name.as_str()).ok_or_else(|| {
                Error::Data(format!("checkpoint lacks parameter `{}`", entry.name))
            })?;
            if t.shape() != entry.value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{}` has shape {:?} in checkpoint, model expects {:?}",
                    entry.name,
                    t.shape(),
                    entry.value.shape()
                )));
            }
            entry.value = (*t).clone();
        }
        Ok(())
    }
}
