//! Named parameter storage shared by every model block.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, Tensor};

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    tensor: Tensor,
    trainable: bool,
}

/// Ordered collection of named tensors. Trainable entries are autodiff
/// leaves tagged with their [`ParamId`]; frozen entries are constants.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::contract("ParamStore::add", format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.entries.len());
        let tensor = if trainable {
            Tensor::param(id, shape, data)?
        } else {
            Tensor::new(shape, data)?
        };
        self.index.insert(name.to_string(), id.0);
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Replaces the values of `id`, keeping its shape and trainability.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(id.0)
            .ok_or_else(|| Error::contract("ParamStore::set_data", format!("unknown parameter {}", id.0)))?;
        let shape = entry.tensor.shape().to_vec();
        entry.tensor = if entry.trainable {
            Tensor::param(id, &shape, data)?
        } else {
            Tensor::new(&shape, data)?
        };
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.tensor))
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, _, t)| t.numel()).sum()
    }

    /// Copy whose tensors are all constants, for inference without graph
    /// recording.
    pub fn detached(&self) -> ParamStore {
        let entries = self
            .entries
            .iter()
            .map(|e| Entry {
                name: e.name.clone(),
                tensor: e.tensor.detach(),
                trainable: false,
            })
            .collect();
        ParamStore {
            entries,
            index: self.index.clone(),
        }
    }
}
