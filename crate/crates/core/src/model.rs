//! Full classifier: embedding lookup, optional BiLSTM context encoder and
//! the MEGA encoder.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{bilstm_encode, AspectExample, Batch, BiLstm, Vocab, WordVectors};
use crate::encoder::{dropout, MegaConfig, MegaEncoder, CLASS_COUNT};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{ParamId, Tensor};

/// What feeds the MEGA encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextEncoder {
    /// BiLSTM states of width `d_model`.
    Bilstm,
    /// The embeddings themselves; needs `embed_dim == d_model`.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mega: MegaConfig,
    pub embed_dim: usize,
    pub encoder: ContextEncoder,
    pub train_embeddings: bool,
    pub embed_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mega: MegaConfig::default(),
            embed_dim: 300,
            encoder: ContextEncoder::Bilstm,
            train_embeddings: false,
            embed_dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.mega.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.encoder == ContextEncoder::Raw && self.embed_dim != self.mega.d_model {
            return Err(Error::Config(format!(
                "raw encoder needs embed_dim ({}) == d_model ({})",
                self.embed_dim, self.mega.d_model
            )));
        }
        if self.encoder == ContextEncoder::Bilstm && self.mega.d_model % 2 != 0 {
            return Err(Error::Config(format!("BiLSTM needs an even d_model, got {}", self.mega.d_model)));
        }
        if !(0.0..1.0).contains(&self.embed_dropout) {
            return Err(Error::Config(format!("embed_dropout {} outside [0, 1)", self.embed_dropout)));
        }
        Ok(())
    }
}

impl ModelConfig {
    /// Settings that differ from `other`, as `(key, ours, theirs)`. Keys are
    /// the leaf field names, which match the flat run configuration.
    pub fn diff(&self, other: &ModelConfig) -> Vec<(String, String, String)> {
        fn leaves(v: serde_json::Value, out: &mut Vec<(String, serde_json::Value)>) {
            match v {
                serde_json::Value::Object(map) => {
                    for (k, v) in map {
                        if v.is_object() {
                            leaves(v, out);
                        } else {
                            out.push((k, v));
                        }
                    }
                }
                other => out.push((String::new(), other)),
            }
        }
        let flat = |c: &ModelConfig| {
            let mut out = Vec::new();
            leaves(serde_json::to_value(c).expect("config serializes"), &mut out);
            out
        };
        let theirs = flat(other);
        flat(self)
            .into_iter()
            .filter_map(|(k, a)| {
                let b = theirs.iter().find(|(kb, _)| *kb == k).map(|(_, b)| b.clone())?;
                (a != b).then(|| (k, a.to_string(), b.to_string()))
            })
            .collect()
    }

    /// `(trainable, total)` scalar counts for a vocabulary of `vocab_len`.
    pub fn param_count(&self, vocab_len: usize) -> (usize, usize) {
        let embedding = vocab_len * self.embed_dim;
        let bilstm = match self.encoder {
            ContextEncoder::Bilstm => BiLstm::param_count(self.embed_dim, self.mega.d_model),
            ContextEncoder::Raw => 0,
        };
        let rest = bilstm + MegaEncoder::param_count(&self.mega);
        let trainable = if self.train_embeddings { rest + embedding } else { rest };
        (trainable, rest + embedding)
    }
}

/// Shortens the borrow of an optional generator so that it can be passed
/// down more than once.
pub(crate) fn reborrow<'s>(rng: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

/// Parameters and structure of a classifier. Values live in `store`; the
/// forward functions take a store argument so that callers can evaluate
/// perturbed or detached copies.
#[derive(Clone, Debug)]
pub struct AbsaModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub bilstm: Option<BiLstm>,
    pub mega: MegaEncoder,
}

impl AbsaModel {
    pub fn new(cfg: &ModelConfig, vocab: Vocab, vectors: &WordVectors, seed: u64) -> Result<AbsaModel> {
        cfg.validate()?;
        if vectors.dim != cfg.embed_dim || vectors.table.len() != vocab.len() * cfg.embed_dim {
            return Err(Error::Config(format!(
                "embedding table is {} rows of {}, vocabulary has {} of {}",
                vectors.table.len() / vectors.dim.max(1),
                vectors.dim,
                vocab.len(),
                cfg.embed_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let embedding = store.add(
            "embedding",
            &[vocab.len(), cfg.embed_dim],
            vectors.table.clone(),
            cfg.train_embeddings,
        )?;
        let bilstm = match cfg.encoder {
            ContextEncoder::Bilstm => Some(BiLstm::init(&mut store, "bilstm", cfg.embed_dim, cfg.mega.d_model, &mut rng)?),
            ContextEncoder::Raw => None,
        };
        let mega = MegaEncoder::init(&mut store, &cfg.mega, &mut rng)?;
        Ok(AbsaModel {
            cfg: cfg.clone(),
            vocab,
            store,
            embedding,
            bilstm,
            mega,
        })
    }

    /// Context states `[B, W, d_model]` for a batch.
    pub fn encode(&self, store: &ParamStore, batch: &Batch, train: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let (b, w, de) = (batch.size(), batch.width, self.cfg.embed_dim);
        let mut x = store.get(self.embedding).gather_rows(&batch.ids)?.reshape(&[b, w, de])?;
        if let Some(rng) = train {
            x = dropout(&x, self.cfg.embed_dropout, rng)?;
        }
        match &self.bilstm {
            Some(p) => bilstm_encode(store, p, &x, &batch.lengths),
            None => Ok(x),
        }
    }

    /// Class probabilities `[3]` for every example of `batch`. With `train`,
    /// dropout masks are drawn from it.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        batch: &Batch,
        mut train: Option<&mut dyn RngCore>,
    ) -> Result<Vec<Tensor>> {
        let d = self.cfg.mega.d_model;
        let states = self.encode(store, batch, reborrow(&mut train))?;
        let mut out = Vec::with_capacity(batch.size());
        for row in 0..batch.size() {
            let h = states
                .narrow(0, row, 1)?
                .reshape(&[batch.width, d])?
                .narrow(0, 0, batch.lengths[row])?;
            out.push(self.mega.forward(store, &h, batch.spans[row], reborrow(&mut train))?);
        }
        Ok(out)
    }

    /// Inference probabilities for `examples`, in order, using the model's
    /// own parameters. Batches run in parallel.
    pub fn predict(&self, examples: &[AspectExample], batch_size: usize) -> Result<Vec<[f64; CLASS_COUNT]>> {
        let store = self.store.detached();
        let chunks: Vec<&[AspectExample]> = examples.chunks(batch_size.max(1)).collect();
        let per_chunk: Vec<Result<Vec<[f64; CLASS_COUNT]>>> = chunks
            .par_iter()
            .map(|chunk| {
                let refs: Vec<&AspectExample> = chunk.iter().collect();
                let batch = Batch::from_examples(&refs, &self.vocab);
                let probs = self.forward_batch(&store, &batch, None)?;
                Ok(probs
                    .iter()
                    .map(|p| {
                        let v = p.data();
                        [v[0], v[1], v[2]]
                    })
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(examples.len());
        for r in per_chunk {
            out.extend(r?);
        }
        Ok(out)
    }
}
