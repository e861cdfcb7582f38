//! Named parameter storage shared by every layer of a model.

use crate::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within the store.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry { name, value, trainable: true });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Copies values from `other` by name. Every parameter of `self` must be present in
    /// `other` with the same shape; trainable flags are left untouched.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), String> {
        let index: HashMap<&str, &ParamEntry> =
            other.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        for e in &mut self.entries {
            let src = index.get(e.name.as_str()).ok_or_else(|| format!("missing parameter {}", e.name))?;
            if src.value.shape() != e.value.shape() {
                return Err(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    e.name,
                    e.value.shape(),
                    src.value.shape()
                ));
            }
            e.value = src.value.clone();
        }
        if other.entries.len() != self.entries.len() {
            return Err(format!(
                "checkpoint has {} parameters, model has {}",
                other.entries.len(),
                self.entries.len()
            ));
        }
        Ok(())
    }
}
