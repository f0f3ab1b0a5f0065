//! Training loop for the augmentation model.
//!
//! Every iteration draws a batch of masked examples, computes the mean
//! fragment-token negative log-likelihood and takes one Adam step. Iteration
//! `i` samples from its own random stream (`seed`, stream `i`), so a run
//! resumed from a saved [`TrainState`] follows exactly the same trajectory as
//! an uninterrupted one.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Corpus};
use crate::error::{Error, Result};
use crate::masking::{
    build_batch_with, fragment_length, mask_fragment, validate_proportion, ExampleSampler,
    SamplerConfig,
};
use crate::nn::{fit, Adam, AdamConfig, Checkpoint, Gradients, Parameterized};
use crate::seq2seq::{ModelConfig, Seq2SeqModel, Seq2SeqParams, TokenizedExample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total iterations `K`.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_norm: Option<f64>,
    /// Linear learning-rate warmup length; 0 keeps the rate constant.
    pub warmup_iterations: usize,
    pub validation_interval: usize,
    pub mask_proportion: f64,
    pub min_length_exclusive: usize,
    pub rng_seed: u64,
    /// Directory receiving `final.ckpt`, `best.ckpt`, `state.ckpt` and `log.csv`.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: Some(1.0),
            warmup_iterations: 0,
            validation_interval: 100,
            mask_proportion: 0.5,
            min_length_exclusive: 5,
            rng_seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.validation_interval == 0 {
            return Err(Error::Config(
                "validation interval must be at least 1".into(),
            ));
        }
        validate_proportion(self.mask_proportion)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            clip_norm: self.clip_norm,
        }
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            min_length_exclusive: self.min_length_exclusive,
            mask_proportion: self.mask_proportion,
            batch_size: self.batch_size,
            rng_seed: self.rng_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Mean training loss over the iterations since the previous record.
    pub loss: f64,
    pub val_ppl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// Loss of every iteration, index `i - 1` for iteration `i`.
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_ppl\n");
        for r in &self.records {
            writeln!(out, "{},{},{}", r.iteration, r.loss, r.val_ppl).unwrap();
        }
        out
    }
}

/// Everything needed to continue training: weights, optimizer moments and
/// the number of completed iterations.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Seq2SeqModel,
    pub adam: Adam,
    pub iteration: usize,
    pub log: TrainLog,
    pub best: Option<(usize, f64, Seq2SeqModel)>,
}

pub const STATE_KIND: &str = "seq2seq-train-state";

impl TrainState {
    pub fn new(model: Seq2SeqModel, config: &TrainConfig) -> Self {
        let mut adam = Adam::new(config.adam(), model.params.store());
        for id in model.params.frozen() {
            adam.freeze(id);
        }
        TrainState {
            model,
            adam,
            iteration: 0,
            log: TrainLog::default(),
            best: None,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let inner = self.model.to_checkpoint();
        let meta = serde_json::json!({
            "model": inner.meta,
            "iteration": self.iteration,
            "adam_step": self.adam.step,
            "adam": self.adam.config,
            "log": self.log,
        });
        let mut ck = Checkpoint::new(STATE_KIND, meta);
        let store = self.model.params.store();
        ck.push_store("model.", store);
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        ck.push_tensors("adam.m.", names.iter().copied().zip(&self.adam.m));
        ck.push_tensors("adam.v.", names.iter().copied().zip(&self.adam.v));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != STATE_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {STATE_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let model_ck = Checkpoint {
            kind: crate::seq2seq::SEQ2SEQ_KIND.into(),
            meta: ck.meta["model"].clone(),
            tensors: ck
                .tensors
                .iter()
                .filter_map(|(n, t)| n.strip_prefix("model.").map(|n| (n.to_string(), t.clone())))
                .collect(),
        };
        let model = Seq2SeqModel::from_checkpoint(&model_ck)?;
        let adam_config: AdamConfig = serde_json::from_value(ck.meta["adam"].clone())?;
        let mut adam = Adam::new(adam_config, model.params.store());
        for id in model.params.frozen() {
            adam.freeze(id);
        }
        adam.step = ck.meta["adam_step"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing adam_step".into()))?;
        let store = model.params.store();
        for (i, (name, t)) in store.iter().enumerate() {
            let m = ck
                .tensor(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing moment for `{name}`")))?;
            let v = ck
                .tensor(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing moment for `{name}`")))?;
            if m.dim() != t.dim() || v.dim() != t.dim() {
                return Err(Error::ShapeMismatch {
                    name: name.to_string(),
                    expected: t.dim(),
                    found: m.dim(),
                });
            }
            adam.m[i] = m.clone();
            adam.v[i] = v.clone();
        }
        let iteration = ck.meta["iteration"]
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("missing iteration".into()))?
            as usize;
        let log: TrainLog = serde_json::from_value(ck.meta["log"].clone())?;
        Ok(TrainState {
            model,
            adam,
            iteration,
            log,
            best: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Seq2SeqModel,
    /// `(iteration, validation perplexity, model)` of the best validation point.
    pub best: Option<(usize, f64, Seq2SeqModel)>,
    pub log: TrainLog,
}

fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Masks every holdout sentence once (seeded) and returns
/// `exp(mean NLL per fragment token)`.
pub fn validation_perplexity(
    model: &Seq2SeqModel,
    holdout: &Corpus,
    r: f64,
    seed: u64,
) -> Result<f64> {
    if holdout.is_empty() {
        return Err(Error::Config("holdout corpus is empty".into()));
    }
    let examples = holdout_examples(model, holdout, r, seed)?;
    perplexity_of(&model.params, &examples)
}

fn holdout_examples(
    model: &Seq2SeqModel,
    holdout: &Corpus,
    r: f64,
    seed: u64,
) -> Result<Vec<TokenizedExample>> {
    use rand::Rng;
    holdout
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = iteration_rng(seed, i);
            let m = fragment_length(s.len(), r);
            let u = rng.gen_range(1..=s.len() - m + 1);
            Ok(model.tokenize(&mask_fragment(s, u, r)?))
        })
        .collect()
}

fn perplexity_of(params: &Seq2SeqParams, examples: &[TokenizedExample]) -> Result<f64> {
    use rayon::prelude::*;
    let lps: Vec<Result<f64>> = examples
        .par_iter()
        .map(|e| params.sequence_log_prob(e))
        .collect();
    let mut total = 0.0;
    for lp in lps {
        total += lp?;
    }
    let tokens: usize = examples.iter().map(|e| e.target.len()).sum();
    Ok((-total / tokens as f64).exp())
}

/// Builds the vocabulary from `corpus`, initializes a model and trains it.
pub fn train(
    corpus: &Corpus,
    model_config: ModelConfig,
    train_config: &TrainConfig,
    holdout: &Corpus,
) -> Result<TrainOutcome> {
    let vocab = build_vocab(corpus, 1);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..model_config
    };
    if corpus.max_len() > config.max_positions || holdout.max_len() > config.max_positions {
        return Err(Error::Config(format!(
            "max_positions {} is shorter than the longest sentence",
            config.max_positions
        )));
    }
    let model = Seq2SeqModel::new(config, vocab)?;
    let state = TrainState::new(model, train_config);
    continue_training(state, corpus, train_config, holdout)
}

/// Runs iterations `state.iteration + 1 ..= K`.
pub fn continue_training(
    mut state: TrainState,
    corpus: &Corpus,
    config: &TrainConfig,
    holdout: &Corpus,
) -> Result<TrainOutcome> {
    config.validate()?;
    let sampler = ExampleSampler::new(corpus, config.min_length_exclusive)?;
    let sampler_config = config.sampler();
    let holdout_set = if holdout.is_empty() {
        None
    } else {
        Some(holdout_examples(
            &state.model,
            holdout,
            config.mask_proportion,
            config.rng_seed,
        )?)
    };
    let val_ppl = |params: &Seq2SeqParams| -> Result<f64> {
        match &holdout_set {
            Some(examples) => perplexity_of(params, examples),
            None => Ok(f64::NAN),
        }
    };
    let batch_at = |state: &TrainState, iteration: usize| -> Result<Vec<TokenizedExample>> {
        let mut rng = iteration_rng(config.rng_seed, iteration);
        Ok(build_batch_with(&sampler, &sampler_config, &mut rng)?
            .iter()
            .map(|ex| state.model.tokenize(ex))
            .collect())
    };

    if state.iteration == 0 && state.log.records.is_empty() {
        let batch = batch_at(&state, 0)?;
        let (loss, _) = state.model.params.loss_and_gradients(&batch, 0)?;
        let ppl = val_ppl(&state.model.params)?;
        state.log.records.push(TrainRecord {
            iteration: 0,
            loss,
            val_ppl: ppl,
        });
        if ppl.is_finite() {
            state.best = Some((0, ppl, state.model.clone()));
        }
    }

    let mut since_record = Vec::new();
    while state.iteration < config.iterations {
        let iteration = state.iteration + 1;
        let batch = batch_at(&state, iteration)?;
        let dropout_seed = config.rng_seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (loss, mut grads) = state
            .model
            .params
            .loss_and_gradients(&batch, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, loss });
        }
        if config.warmup_iterations > 0 {
            let frac = (iteration as f64 / config.warmup_iterations as f64).min(1.0);
            state.adam.config.learning_rate = config.learning_rate * frac;
        }
        state
            .adam
            .update(state.model.params.store_mut(), &mut grads);
        state.iteration = iteration;
        state.log.losses.push(loss);
        since_record.push(loss);

        if iteration.is_multiple_of(config.validation_interval) || iteration == config.iterations {
            let ppl = val_ppl(&state.model.params)?;
            let mean = since_record.iter().sum::<f64>() / since_record.len() as f64;
            since_record.clear();
            state.log.records.push(TrainRecord {
                iteration,
                loss: mean,
                val_ppl: ppl,
            });
            if ppl.is_finite() && state.best.as_ref().is_none_or(|(_, b, _)| ppl < *b) {
                state.best = Some((iteration, ppl, state.model.clone()));
            }
            if let Some(dir) = &config.checkpoint_dir {
                save_progress(dir, &state)?;
            }
        }
    }
    if let Some(dir) = &config.checkpoint_dir {
        save_progress(dir, &state)?;
    }
    Ok(TrainOutcome {
        model: state.model,
        best: state.best,
        log: state.log,
    })
}

fn save_progress(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    state.model.to_checkpoint().save(dir.join("final.ckpt"))?;
    if let Some((_, _, best)) = &state.best {
        best.to_checkpoint().save(dir.join("best.ckpt"))?;
    }
    state.to_checkpoint().save(dir.join("state.ckpt"))?;
    let log_path = dir.join("log.csv");
    fs::write(&log_path, state.log.to_csv()).map_err(|e| Error::io(&log_path, e))
}

/// Trains an auxiliary model for `config.iterations` Adam steps.
/// `batch_loss(model, rng, dropout_seed)` draws the batch of each iteration
/// from that iteration's own random stream.
pub fn fit_seeded<M, F>(model: &mut M, config: &TrainConfig, mut batch_loss: F) -> Result<Vec<f64>>
where
    M: Parameterized,
    F: FnMut(&M, &mut ChaCha8Rng, u64) -> Result<(f64, Gradients)>,
{
    config.validate()?;
    let mut adam = Adam::new(config.adam(), model.store());
    fit(model, &mut adam, config.iterations, |m, i| {
        let mut rng = iteration_rng(config.rng_seed, i);
        batch_loss(m, &mut rng, config.rng_seed.wrapping_add(i as u64))
    })
}

/// Least-squares slope of `ys` against their indices.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}
