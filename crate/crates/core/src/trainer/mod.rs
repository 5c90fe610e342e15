//! Maximum-likelihood pretraining of the encoder and flow on `(x*, D)` pairs
//! with random context subsampling.

mod adam;
mod checkpoint;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{clip_global_norm, cosine_lr, Adam};
pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::Dataset;
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::funcprior::{Corpus, PriorHyperparams, TrainingPair};
use crate::model::{Model, TARGET_CLAMP};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Context subsample size bounds; the upper bound is capped at `|D|`.
    pub augment_min: usize,
    pub augment_max: usize,
    pub validation_fraction: f64,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            learning_rate: 3e-4,
            seed: 0,
            augment_min: 1,
            augment_max: usize::MAX,
            validation_fraction: 0.1,
            grad_clip: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.augment_min == 0 || self.augment_min > self.augment_max {
            return Err(Error::InvalidArgument(format!("invalid training config: {self:?}")));
        }
        if !(self.learning_rate > 0.0 && (0.0..1.0).contains(&self.validation_fraction) && self.grad_clip > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid training config: {self:?}")));
        }
        Ok(())
    }
}

/// Keeps `x*` and replaces `D` by a uniform random subset of size
/// `n ~ U{n_lo..n_hi}`.
pub fn augment(pair: &TrainingPair, rng: &mut Rng, n_lo: usize, n_hi: usize) -> Result<TrainingPair> {
    let len = pair.data.len();
    if n_lo == 0 || n_lo > n_hi || n_hi > len {
        return Err(Error::InvalidArgument(format!("subsample bounds {n_lo}..={n_hi} for a dataset of {len}")));
    }
    let n = rng.random_range(n_lo..=n_hi);
    let picked = index::sample(rng, len, n).into_vec();
    Ok(TrainingPair { x_star: pair.x_star.clone(), y_star: pair.y_star, data: pair.data.select(&picked) })
}

fn as_batch(pairs: &[TrainingPair]) -> Vec<(&Dataset, &[f64])> {
    pairs.iter().map(|p| (&p.data, p.x_star.as_slice())).collect()
}

/// Finds the first pair whose own loss is not finite.
fn offending_pair(model: &Model, batch: &[(&Dataset, &[f64])]) -> Error {
    for (i, item) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let vars = model.params().bind(&mut tape);
        let ok = model.nll(&mut tape, &vars, std::slice::from_ref(item)).is_ok_and(|l| tape.value(l).item().is_finite());
        if !ok {
            return Error::NonFiniteLoss { index: i };
        }
    }
    Error::NonFinite { op: "nll_loss" }
}

/// Mean negative log-likelihood `-(1/B) sum log p(x* | D)`.
pub fn nll_loss(model: &Model, batch: &[TrainingPair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let items = as_batch(batch);
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    match model.nll(&mut tape, &vars, &items) {
        Ok(l) if tape.value(l).item().is_finite() => Ok(tape.value(l).item()),
        Ok(_) | Err(Error::NonFinite { .. }) => Err(offending_pair(model, &items)),
        Err(e) => Err(e),
    }
}

/// Loss and per-parameter gradients for one batch.
pub fn loss_and_grads(model: &Model, batch: &[TrainingPair]) -> Result<(f64, Vec<Vec<f64>>)> {
    let items = as_batch(batch);
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape);
    let loss = match model.nll(&mut tape, &vars, &items) {
        Ok(l) => l,
        Err(Error::NonFinite { .. }) => return Err(offending_pair(model, &items)),
        Err(e) => return Err(e),
    };
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(offending_pair(model, &items));
    }
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|v| grads.wrt(*v).into_data()).collect()))
}

/// Mean NLL over `pairs` in chunks, weighting each chunk by its size.
pub fn mean_nll(model: &Model, pairs: &[TrainingPair], chunk: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for c in pairs.chunks(chunk.max(1)) {
        total += nll_loss(model, c)? * c.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean NLL with the context replaced by zeros, i.e. a model that ignores
/// the data.
pub fn context_blind_nll(model: &Model, pairs: &[TrainingPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let zero = vec![0.0; model.config().flow.context_dim];
    let ctx = model.flow().prepare(model.params(), &zero)?;
    let mut total = 0.0;
    for p in pairs {
        let x: Vec<f64> = p.x_star.iter().map(|v| v.clamp(TARGET_CLAMP, 1.0 - TARGET_CLAMP)).collect();
        total -= model.flow().log_prob_prepared(model.params(), &ctx, &x)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: u64,
    pub train_nll: f64,
    pub val_nll: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochReport>,
}

/// Hex SHA-256 of the corpus in its binary file encoding.
pub fn corpus_hash(corpus: &Corpus) -> String {
    Sha256::digest(corpus.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic train/validation split of pair indices.
pub fn split_indices(count: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng::child(seed, 0x5_1717));
    let n_val = if count >= 2 { ((count as f64 * fraction).ceil() as usize).min(count - 1) } else { 0 };
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Trains `model` on `corpus`. `on_epoch` sees every completed epoch with
/// the current weights.
///
/// A non-finite loss aborts with [`Error::Diverged`], which carries the
/// weights from the end of the last completed epoch.
pub fn train(
    corpus: &Corpus,
    mut model: Model,
    prior: Option<PriorHyperparams>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &Model),
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.dim != model.dim() {
        return Err(Error::Dimension { expected: model.dim(), got: corpus.dim });
    }
    if corpus.pairs.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let (train_idx, val_idx) = split_indices(corpus.pairs.len(), config.validation_fraction, config.seed);
    let val: Vec<TrainingPair> = val_idx.iter().map(|&i| corpus.pairs[i].clone()).collect();
    let eval_val = |m: &Model| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            mean_nll(m, &val, config.batch_size).map(Some)
        }
    };

    let batches_per_epoch = train_idx.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut meta = TrainingMeta {
        corpus_hash: corpus_hash(corpus),
        corpus_pairs: corpus.pairs.len(),
        seed: config.seed,
        epochs: config.epochs,
        steps: 0,
        batch_size: config.batch_size,
        learning_rate: config.learning_rate,
        initial_val_nll: eval_val(&model)?,
        final_train_nll: None,
        final_val_nll: None,
    };
    meta.final_val_nll = meta.initial_val_nll;

    let mut adam = Adam::new(model.params().tensors());
    let mut history = Vec::with_capacity(config.epochs);
    let mut order = train_idx.clone();
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng::child(config.seed, 2 * epoch as u64 + 1);
        let mut augment_rng = rng::child(config.seed, 2 * epoch as u64 + 2);
        order.shuffle(&mut shuffle_rng);
        let last_good = model.params().clone();
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let p = &corpus.pairs[i];
                    let hi = config.augment_max.min(p.data.len());
                    augment(p, &mut augment_rng, config.augment_min.min(hi), hi)
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = cosine_lr(config.learning_rate, step, total_steps);
            let diverged = |model: &mut Model, meta: &TrainingMeta| -> Error {
                let mut good = model.clone();
                good.params_mut().assign(&last_good).expect("same layout");
                Error::Diverged {
                    epoch,
                    step,
                    last_good: Box::new(Checkpoint::new(good, prior.clone(), meta.clone())),
                }
            };
            let (loss, mut grads) = match loss_and_grads(&model, &batch) {
                Ok(r) => r,
                Err(Error::NonFiniteLoss { .. } | Error::NonFinite { .. }) => return Err(diverged(&mut model, &meta)),
                Err(e) => return Err(e),
            };
            clip_global_norm(&mut grads, config.grad_clip);
            adam.update(model.params_mut().tensors_mut(), &grads, lr);
            if !model.params().all_finite() {
                return Err(diverged(&mut model, &meta));
            }
            epoch_loss += loss * batch.len() as f64;
            step += 1;
            meta.steps = step as u64;
        }
        let report = EpochReport {
            epoch,
            steps: step as u64,
            train_nll: epoch_loss / train_idx.len() as f64,
            val_nll: eval_val(&model)?,
            learning_rate: cosine_lr(config.learning_rate, step.saturating_sub(1), total_steps),
        };
        meta.final_train_nll = Some(report.train_nll);
        meta.final_val_nll = report.val_nll;
        on_epoch(&report, &model);
        history.push(report);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint::new(model, prior, meta), history })
}
