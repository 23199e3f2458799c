//! Loss, optimizer and the epoch loop with early stopping.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{AspectExample, Batch};
use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::AbsaModel;
use crate::params::ParamStore;
use crate::tensor::{backward, GradientMap, Tensor};

/// Probabilities below this are clamped before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-ln p[gold]`. The flag is set when the floor was applied.
pub fn cross_entropy(probs: &Tensor, gold: usize) -> Result<(Tensor, bool)> {
    let p = probs.narrow(0, gold, 1)?;
    let clamped = p.data()[0] < PROB_FLOOR;
    Ok((p.ln_clamped(PROB_FLOOR)?.neg()?.sum_all()?, clamped))
}

/// Mean of [`cross_entropy`] over a batch, with the number of clamps.
pub fn batch_cross_entropy(probs: &[Tensor], gold: &[usize]) -> Result<(Tensor, usize)> {
    if probs.is_empty() || probs.len() != gold.len() {
        return Err(Error::contract(
            "batch_cross_entropy",
            format!("{} predictions for {} labels", probs.len(), gold.len()),
        ));
    }
    let mut total = Tensor::scalar(0.0);
    let mut clamps = 0;
    for (p, &g) in probs.iter().zip(gold) {
        let (l, c) = cross_entropy(p, g)?;
        total = total.add(&l)?;
        clamps += c as usize;
    }
    Ok((total.scale(1.0 / probs.len() as f64)?, clamps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled decay, applied as `p -= lr·weight_decay·p`.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a better eval macro-F1 before stopping.
    pub patience: usize,
    /// Hard cap on optimizer steps, checked after every step.
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            max_steps: None,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// First and second moments indexed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    /// Steps dropped because a gradient was not finite.
    pub skipped: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zero moments for trainable parameters; frozen ones get empty slots.
    pub fn new(store: &ParamStore) -> AdamState {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(id, _, t)| if store.is_trainable(id) { vec![0.0; t.numel()] } else { Vec::new() })
            .collect();
        AdamState {
            step: 0,
            skipped: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of every trainable parameter. Parameters the loss does
/// not reach see a zero gradient. Returns false, leaving everything
/// untouched, when any gradient is non-finite.
pub fn optimizer_step(store: &mut ParamStore, grads: &GradientMap, state: &mut AdamState, cfg: &TrainConfig) -> Result<bool> {
    if !grads.all_finite() {
        state.skipped += 1;
        warn!("non-finite gradient, step skipped ({} so far)", state.skipped);
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.trainable().map(|(id, _, _)| id).collect();
    for id in ids {
        let p = store.get(id);
        let g = grads.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]);
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let mut next = p.to_vec();
        for i in 0..next.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            next[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.adam_eps) + cfg.weight_decay * next[i]);
        }
        store.set_data(id, next)?;
    }
    Ok(true)
}

/// Probabilities and metrics of `model` on `examples`.
pub fn evaluate(model: &AbsaModel, examples: &[AspectExample], batch_size: usize) -> Result<(Metrics, Vec<[f64; 3]>)> {
    let probs = model.predict(examples, batch_size)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label.index()).collect();
    Ok((Metrics::from_probs(&gold, &probs), probs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub macro_f1: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_macro_f1: f64,
    pub since_best: usize,
    pub clamps: u64,
    /// Parameters at the best epoch.
    pub best: Option<ParamStore>,
}

impl TrainState {
    pub fn new(model: &AbsaModel) -> TrainState {
        TrainState {
            epoch: 0,
            adam: AdamState::new(&model.store),
            history: Vec::new(),
            best_epoch: None,
            best_macro_f1: f64::NEG_INFINITY,
            since_best: 0,
            clamps: 0,
            best: None,
        }
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.max_epochs
            || (self.best_epoch.is_some() && self.since_best >= cfg.patience)
            || cfg.max_steps.is_some_and(|cap| self.adam.step >= cap)
    }
}

/// Seed derived from the run seed and a position in the run.
pub fn derive_seed(seed: u64, epoch: usize, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Loss and gradient of one batch. Every example gets its own dropout
/// stream and graph; gradients are summed in example order.
pub fn batch_gradient(model: &AbsaModel, batch: &[&AspectExample], seed: u64) -> Result<(f64, GradientMap, usize)> {
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, GradientMap, usize)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, i as u64));
            let single = Batch::from_examples(&[ex], &model.vocab);
            let probs = model.forward_batch(&model.store, &single, Some(&mut rng))?;
            let (loss, clamps) = batch_cross_entropy(&probs, &[ex.label.index()])?;
            let grads = backward(&loss.scale(scale)?)?;
            Ok((loss.item()?, grads, clamps))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = GradientMap::default();
    let mut clamps = 0;
    for part in parts {
        let (l, g, c) = part?;
        total += l * scale;
        grads.merge(g)?;
        clamps += c;
    }
    Ok((total, grads, clamps))
}

/// Runs one epoch of shuffled mini-batch updates. Returns the mean batch
/// loss.
pub fn train_epoch(model: &mut AbsaModel, cfg: &TrainConfig, state: &mut TrainState, train: &[AspectExample]) -> Result<f64> {
    let epoch = state.epoch + 1;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch, u64::MAX)));
    let mut losses = Vec::new();
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let examples: Vec<&AspectExample> = chunk.iter().map(|&i| &train[i]).collect();
        let (loss, grads, clamps) = batch_gradient(model, &examples, derive_seed(cfg.seed, epoch, bi as u64))?;
        state.clamps += clamps as u64;
        optimizer_step(&mut model.store, &grads, &mut state.adam, cfg)?;
        losses.push(loss);
        if cfg.max_steps.is_some_and(|cap| state.adam.step >= cap) {
            break;
        }
    }
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Writes `record` as one line of JSON.
pub fn write_record(w: &mut dyn Write, record: &EpochRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Where a run reports progress.
#[derive(Default)]
pub struct TrainSinks<'a> {
    /// One JSON object per epoch.
    pub log: Option<&'a mut dyn Write>,
    /// Receives `last.ckpt` after every epoch and `best.ckpt` on improvement.
    pub out_dir: Option<&'a Path>,
    /// Stop after this many epochs in this call, for resumption tests.
    pub epoch_budget: Option<usize>,
}

/// Trains until the epoch limit, the step cap or early stopping, keeping
/// the parameters of the best eval macro-F1 in `state.best`.
pub fn fit(
    model: &mut AbsaModel,
    cfg: &TrainConfig,
    state: &mut TrainState,
    train: &[AspectExample],
    eval: &[AspectExample],
    mut sinks: TrainSinks<'_>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config("training and evaluation sets must be non-empty".into()));
    }
    let mut ran = 0;
    while !state.finished(cfg) && sinks.epoch_budget.map_or(true, |b| ran < b) {
        let loss = train_epoch(model, cfg, state, train)?;
        state.epoch += 1;
        ran += 1;
        let (metrics, _) = evaluate(model, eval, cfg.batch_size)?;
        let record = EpochRecord {
            epoch: state.epoch,
            step: state.adam.step,
            loss,
            acc: metrics.accuracy,
            macro_f1: metrics.macro_f1,
        };
        info!(
            "epoch {} step {} loss {:.4} acc {:.4} macro_f1 {:.4}",
            record.epoch, record.step, record.loss, record.acc, record.macro_f1
        );
        if let Some(log) = sinks.log.as_deref_mut() {
            write_record(log, &record)?;
        }
        state.history.push(record);
        let improved = metrics.macro_f1 > state.best_macro_f1;
        if improved {
            state.best_macro_f1 = metrics.macro_f1;
            state.best_epoch = Some(state.epoch);
            state.since_best = 0;
            state.best = Some(model.store.clone());
        } else {
            state.since_best += 1;
        }
        if let Some(dir) = sinks.out_dir {
            Checkpoint::capture(model, cfg, state).save(&dir.join("last.ckpt"))?;
            if improved {
                Checkpoint::capture_best(model, cfg, state)?.save(&dir.join("best.ckpt"))?;
            }
        }
    }
    if state.clamps > 0 {
        warn!("{} probabilities clamped at {PROB_FLOOR:e}", state.clamps);
    }
    Ok(())
}
