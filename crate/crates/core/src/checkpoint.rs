//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MEGACKPT"  u32 version  u64 header_len  header (UTF-8 JSON)  payload
//! ```
//!
//! The payload is a flat run of `f64` values. The header holds the model
//! and training configuration, the vocabulary, training progress and a
//! directory of tensors, each with a section (`param`, `adam_m`, `adam_v`
//! or `best`), a name, a shape and an offset into the payload counted in
//! scalars.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Vocab, WordVectors};
use crate::error::{Error, Result};
use crate::model::{AbsaModel, ModelConfig};
use crate::params::ParamStore;
use crate::trainer::{AdamState, EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"MEGACKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Param,
    AdamM,
    AdamV,
    Best,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub section: Section,
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_macro_f1: Option<f64>,
    pub since_best: usize,
    pub clamps: u64,
    pub adam_step: u64,
    pub adam_skipped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocab,
    pub progress: Progress,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub payload: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Checkpoint {
    fn push(&mut self, section: Section, name: &str, shape: &[usize], trainable: bool, data: &[f64]) {
        self.header.tensors.push(TensorEntry {
            section,
            name: name.to_string(),
            shape: shape.to_vec(),
            trainable,
            offset: self.payload.len(),
        });
        self.payload.extend_from_slice(data);
    }

    fn empty(model: &AbsaModel, cfg: &TrainConfig, state: &TrainState) -> Checkpoint {
        Checkpoint {
            header: Header {
                model: model.cfg.clone(),
                train: cfg.clone(),
                vocab: model.vocab.clone(),
                progress: Progress {
                    epoch: state.epoch,
                    history: state.history.clone(),
                    best_epoch: state.best_epoch,
                    best_macro_f1: state.best_epoch.map(|_| state.best_macro_f1),
                    since_best: state.since_best,
                    clamps: state.clamps,
                    adam_step: state.adam.step,
                    adam_skipped: state.adam.skipped,
                },
                tensors: Vec::new(),
            },
            payload: Vec::new(),
        }
    }

    fn push_store(&mut self, section: Section, store: &ParamStore) {
        for (id, name, t) in store.iter() {
            self.push(section, name, t.shape(), store.is_trainable(id), t.data());
        }
    }

    /// Full training state: current parameters, optimizer moments and the
    /// best parameters so far.
    pub fn capture(model: &AbsaModel, cfg: &TrainConfig, state: &TrainState) -> Checkpoint {
        let mut c = Checkpoint::empty(model, cfg, state);
        c.push_store(Section::Param, &model.store);
        for (id, name, t) in model.store.trainable() {
            c.push(Section::AdamM, name, t.shape(), true, &state.adam.m[id.0]);
            c.push(Section::AdamV, name, t.shape(), true, &state.adam.v[id.0]);
        }
        if let Some(best) = &state.best {
            c.push_store(Section::Best, best);
        }
        c
    }

    /// The best parameters only, as a self-contained model checkpoint.
    pub fn capture_best(model: &AbsaModel, cfg: &TrainConfig, state: &TrainState) -> Result<Checkpoint> {
        let best = state
            .best
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no best parameters recorded yet".into()))?;
        let mut c = Checkpoint::empty(model, cfg, state);
        c.push_store(Section::Param, best);
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in &self.payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let corrupt = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let raw = &body[hlen..];
        if raw.len() % 8 != 0 {
            return Err(corrupt("payload is not a whole number of scalars"));
        }
        let payload: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut expected = 0;
        for t in &header.tensors {
            if t.offset != expected {
                return Err(Error::Checkpoint(format!("tensor {} at offset {} out of order", t.name, t.offset)));
            }
            expected += numel(&t.shape);
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint(format!(
                "directory covers {expected} scalars, payload has {}",
                payload.len()
            )));
        }
        if let Some(bad) = payload.iter().position(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite scalar at {bad}")));
        }
        Ok(Checkpoint { header, payload })
    }

    pub fn entries(&self, section: Section) -> impl Iterator<Item = (&TensorEntry, &[f64])> {
        self.header
            .tensors
            .iter()
            .filter(move |t| t.section == section)
            .map(|t| (t, &self.payload[t.offset..t.offset + numel(&t.shape)]))
    }

    /// Overwrites every tensor of `store` from `section`, which must name
    /// exactly the same tensors with the same shapes.
    fn fill(&self, store: &mut ParamStore, section: Section) -> Result<()> {
        let mut seen = HashSet::new();
        for (t, data) in self.entries(section) {
            let id = store
                .id_of(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", t.name)))?;
            if store.get(id).shape() != t.shape.as_slice() || store.is_trainable(id) != t.trainable {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is {:?} (trainable {}), model expects {:?} (trainable {})",
                    t.name,
                    t.shape,
                    t.trainable,
                    store.get(id).shape(),
                    store.is_trainable(id)
                )));
            }
            store.set_data(id, data.to_vec())?;
            seen.insert(id);
        }
        if seen.len() != store.len() {
            let missing: Vec<&str> = store.iter().filter(|(id, _, _)| !seen.contains(id)).map(|(_, n, _)| n).collect();
            return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
        }
        Ok(())
    }

    fn skeleton(&self) -> Result<AbsaModel> {
        let cfg = &self.header.model;
        let vocab = self.header.vocab.clone();
        let blank = WordVectors {
            dim: cfg.embed_dim,
            table: vec![0.0; vocab.len() * cfg.embed_dim],
            found: 0,
            coverage: 0.0,
        };
        AbsaModel::new(cfg, vocab, &blank, 0)
    }

    /// The model with the `param` tensors.
    pub fn model(&self) -> Result<AbsaModel> {
        let mut m = self.skeleton()?;
        self.fill(&mut m.store, Section::Param)?;
        Ok(m)
    }

    /// Model, training configuration and training state for resumption.
    pub fn restore(&self) -> Result<(AbsaModel, TrainConfig, TrainState)> {
        let model = self.model()?;
        let p = &self.header.progress;
        let mut adam = AdamState::new(&model.store);
        adam.step = p.adam_step;
        adam.skipped = p.adam_skipped;
        for (section, slots) in [(Section::AdamM, &mut adam.m), (Section::AdamV, &mut adam.v)] {
            let mut count = 0;
            for (t, data) in self.entries(section) {
                let id = model
                    .store
                    .id_of(&t.name)
                    .filter(|&id| slots[id.0].len() == data.len())
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer moment {} does not fit", t.name)))?;
                slots[id.0] = data.to_vec();
                count += 1;
            }
            if count != model.store.trainable().count() {
                return Err(Error::Checkpoint("optimizer state incomplete".into()));
            }
        }
        let best = if self.entries(Section::Best).next().is_some() {
            let mut store = model.store.clone();
            self.fill(&mut store, Section::Best)?;
            Some(store)
        } else {
            None
        };
        let state = TrainState {
            epoch: p.epoch,
            adam,
            history: p.history.clone(),
            best_epoch: p.best_epoch,
            best_macro_f1: p.best_macro_f1.unwrap_or(f64::NEG_INFINITY),
            since_best: p.since_best,
            clamps: p.clamps,
            best,
        };
        Ok((model, self.header.train.clone(), state))
    }
}
