//! Reusable transformer stacks for the auxiliary models: an encoder with a
//! per-position linear head (infilling, tagging) and a decoder-only causal
//! language model (prefix generation, fluency scoring).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    positional_encoding, Adam, Checkpoint, DecoderLayer, Dropout, EncoderLayer, Gradients,
    LayerCache, Linear, Mat, ParamBuilder, ParamId, ParamStore, Tape, Var,
};
use crate::corpus::{Label, TokenId};
use crate::error::{Error, Result};
use crate::seq2seq::ModelConfig;

/// Sums per-example log-likelihoods (computed in parallel) and returns the
/// mean negative log-likelihood per target with its gradient. Example
/// gradients are accumulated in batch order, so the result is independent
/// of scheduling.
pub fn parallel_nll<E, F>(
    store: &ParamStore,
    batch: &[E],
    n_targets: impl Fn(&E) -> usize,
    dropout_rate: f64,
    dropout_seed: u64,
    log_prob: F,
) -> Result<(f64, Gradients)>
where
    E: Sync,
    F: Fn(&mut Tape, &E, &mut Dropout) -> Var + Sync,
{
    let total: usize = batch.iter().map(&n_targets).sum();
    if total == 0 {
        return Err(Error::ModelInput("batch has no targets".into()));
    }
    let seed = -1.0 / total as f64;
    let parts: Vec<(f64, Gradients)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut grads = store.zeros_like();
            let mut tape = Tape::new(store);
            let mut dropout = Dropout::new(dropout_rate, dropout_seed.wrapping_add(i as u64));
            let lp = log_prob(&mut tape, ex, &mut dropout);
            tape.backward(lp, seed, &mut grads);
            (tape.scalar(lp), grads)
        })
        .collect();
    let mut iter = parts.into_iter();
    let (mut lp, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        lp += l;
        grads.add_assign(&g);
    }
    Ok((-lp / total as f64, grads))
}

/// Models that own a [`ParamStore`].
pub trait Parameterized {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

/// Runs `iterations` optimizer steps. `step(model, i)` returns the loss and
/// gradient of iteration `i` (1-based). Returns the per-iteration losses.
pub fn fit<M, F>(model: &mut M, adam: &mut Adam, iterations: usize, mut step: F) -> Result<Vec<f64>>
where
    M: Parameterized,
    F: FnMut(&M, usize) -> Result<(f64, Gradients)>,
{
    let mut losses = Vec::with_capacity(iterations);
    for i in 1..=iterations {
        let (loss, mut grads) = step(model, i)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: i, loss });
        }
        adam.update(model.store_mut(), &mut grads);
        losses.push(loss);
    }
    Ok(losses)
}

fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::ModelInput("empty input".into()));
    }
    if tokens.len() > config.max_positions {
        return Err(Error::ModelInput(format!(
            "input length {} exceeds max_positions {}",
            tokens.len(),
            config.max_positions
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::ModelInput(format!("token id {bad} out of range")));
    }
    Ok(())
}

/// One training example for [`EncoderHead`]: targets are per position,
/// `None` where no loss applies.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadExample {
    pub tokens: Vec<TokenId>,
    /// Empty when the model has no label embeddings.
    pub labels: Vec<Label>,
    pub targets: Vec<Option<usize>>,
}

/// Bidirectional encoder with a linear head on every position.
#[derive(Debug, Clone)]
pub struct EncoderHead {
    config: ModelConfig,
    n_out: usize,
    store: ParamStore,
    tok_emb: ParamId,
    label_emb: Option<ParamId>,
    enc: Vec<EncoderLayer>,
    head: Linear,
    positions: Mat,
}

impl EncoderHead {
    /// Uses `n_enc_layers` of `config`. With `with_labels` each input row also
    /// receives a learned label embedding.
    pub fn new(config: ModelConfig, n_out: usize, with_labels: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let d = config.d_model;
        let tok_emb = pb.uniform("tok_emb", config.vocab_size, d);
        let label_emb = with_labels.then(|| pb.uniform("label_emb", config.n_labels, d));
        let enc = (0..config.n_enc_layers)
            .map(|i| {
                EncoderLayer::build(&mut pb, &format!("enc{i}"), d, config.d_ff, config.n_heads)
            })
            .collect();
        let head = Linear::build(&mut pb, "head", d, n_out);
        Ok(EncoderHead {
            config,
            n_out,
            store: pb.finish(),
            tok_emb,
            label_emb,
            enc,
            head,
            positions: positional_encoding(config.max_positions, d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_out(&self) -> usize {
        self.n_out
    }

    pub fn has_labels(&self) -> bool {
        self.label_emb.is_some()
    }

    fn check(&self, tokens: &[TokenId], labels: &[Label]) -> Result<()> {
        check_tokens(&self.config, tokens)?;
        if self.has_labels() && labels.len() != tokens.len() {
            return Err(Error::ModelInput(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(())
    }

    pub fn logits_on(
        &self,
        tape: &mut Tape,
        tokens: &[TokenId],
        labels: &[Label],
        dropout: &mut Dropout,
    ) -> Var {
        let emb = tape.param(self.tok_emb);
        let mut x = tape.gather(emb, tokens);
        if let Some(label_emb) = self.label_emb {
            let table = tape.param(label_emb);
            let ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            let l = tape.gather(table, &ids);
            x = tape.add(x, l);
        }
        let pos = tape.constant(
            self.positions
                .slice(ndarray::s![..tokens.len(), ..])
                .to_owned(),
        );
        x = tape.add(x, pos);
        x = dropout.apply(tape, x);
        for layer in &self.enc {
            x = layer.forward(tape, x, dropout);
        }
        self.head.forward(tape, x)
    }

    /// `n × n_out` logits, no dropout.
    pub fn logits(&self, tokens: &[TokenId], labels: &[Label]) -> Result<Mat> {
        self.check(tokens, labels)?;
        let mut tape = Tape::new(&self.store);
        let out = self.logits_on(&mut tape, tokens, labels, &mut Dropout::off());
        Ok(tape.value(out).clone())
    }

    pub fn loss_and_gradients(
        &self,
        batch: &[HeadExample],
        dropout_seed: u64,
    ) -> Result<(f64, Gradients)> {
        for ex in batch {
            self.check(&ex.tokens, &ex.labels)?;
            if ex.targets.len() != ex.tokens.len()
                || ex.targets.iter().flatten().any(|&t| t >= self.n_out)
            {
                return Err(Error::ModelInput("targets do not match the input".into()));
            }
        }
        parallel_nll(
            &self.store,
            batch,
            |ex| ex.targets.iter().flatten().count(),
            self.config.dropout_rate,
            dropout_seed,
            |tape, ex, dropout| {
                let logits = self.logits_on(tape, &ex.tokens, &ex.labels, dropout);
                tape.log_softmax_pick(logits, &ex.targets)
            },
        )
    }

    pub fn to_checkpoint(&self, kind: &str, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(kind, meta);
        ck.push_store("", &self.store);
        ck
    }

    pub fn from_checkpoint(
        config: ModelConfig,
        n_out: usize,
        with_labels: bool,
        ck: &Checkpoint,
    ) -> Result<Self> {
        let mut m = EncoderHead::new(config, n_out, with_labels)?;
        ck.restore_into("", &mut m.store)?;
        Ok(m)
    }
}

impl Parameterized for EncoderHead {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Training example for [`CausalLm`]: `targets[i]` is the token expected
/// after reading `tokens[..=i]`, `None` where no loss applies.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<Option<usize>>,
}

impl LmExample {
    /// Next-token targets for `sequence`, scored from index `score_from` on
    /// (the first scored token is `sequence[score_from]`).
    pub fn next_token(sequence: &[TokenId], score_from: usize) -> Self {
        let n = sequence.len() - 1;
        LmExample {
            tokens: sequence[..n].to_vec(),
            targets: (0..n)
                .map(|i| (i + 1 >= score_from).then(|| sequence[i + 1]))
                .collect(),
        }
    }
}

/// Decoder-only transformer language model.
#[derive(Debug, Clone)]
pub struct CausalLm {
    config: ModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    layers: Vec<DecoderLayer>,
    out: Linear,
    positions: Mat,
}

impl CausalLm {
    /// Uses `n_dec_layers` of `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let d = config.d_model;
        let tok_emb = pb.uniform("tok_emb", config.vocab_size, d);
        let layers = (0..config.n_dec_layers)
            .map(|i| {
                DecoderLayer::build(
                    &mut pb,
                    &format!("dec{i}"),
                    d,
                    config.d_ff,
                    config.n_heads,
                    false,
                )
            })
            .collect();
        let out = Linear::build(&mut pb, "out", d, config.vocab_size);
        Ok(CausalLm {
            config,
            store: pb.finish(),
            tok_emb,
            layers,
            out,
            positions: positional_encoding(config.max_positions, d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed(&self, tape: &mut Tape, tokens: &[TokenId], first_position: usize) -> Var {
        let emb = tape.param(self.tok_emb);
        let x = tape.gather(emb, tokens);
        let pos = tape.constant(
            self.positions
                .slice(ndarray::s![
                    first_position..first_position + tokens.len(),
                    ..
                ])
                .to_owned(),
        );
        tape.add(x, pos)
    }

    pub fn logits_on(&self, tape: &mut Tape, tokens: &[TokenId], dropout: &mut Dropout) -> Var {
        let x = self.embed(tape, tokens, 0);
        let mut x = dropout.apply(tape, x);
        for layer in &self.layers {
            x = layer.forward(tape, x, None, None, dropout).0;
        }
        self.out.forward(tape, x)
    }

    /// `n × vocab` next-token logits, no dropout.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Mat> {
        check_tokens(&self.config, tokens)?;
        let mut tape = Tape::new(&self.store);
        let out = self.logits_on(&mut tape, tokens, &mut Dropout::off());
        Ok(tape.value(out).clone())
    }

    /// Summed log-probability of the scored targets.
    pub fn log_prob(&self, ex: &LmExample) -> Result<f64> {
        check_tokens(&self.config, &ex.tokens)?;
        let mut tape = Tape::new(&self.store);
        let logits = self.logits_on(&mut tape, &ex.tokens, &mut Dropout::off());
        let lp = tape.log_softmax_pick(logits, &ex.targets);
        Ok(tape.scalar(lp))
    }

    pub fn loss_and_gradients(
        &self,
        batch: &[LmExample],
        dropout_seed: u64,
    ) -> Result<(f64, Gradients)> {
        for ex in batch {
            check_tokens(&self.config, &ex.tokens)?;
            if ex.targets.len() != ex.tokens.len() {
                return Err(Error::ModelInput("targets do not match the input".into()));
            }
            if ex
                .targets
                .iter()
                .flatten()
                .any(|&t| t >= self.config.vocab_size)
            {
                return Err(Error::ModelInput("target id out of range".into()));
            }
        }
        parallel_nll(
            &self.store,
            batch,
            |ex| ex.targets.iter().flatten().count(),
            self.config.dropout_rate,
            dropout_seed,
            |tape, ex, dropout| {
                let logits = self.logits_on(tape, &ex.tokens, dropout);
                tape.log_softmax_pick(logits, &ex.targets)
            },
        )
    }

    pub fn empty_cache(&self) -> Vec<LayerCache> {
        vec![LayerCache::empty(self.config.d_model); self.layers.len()]
    }

    /// Feeds `tokens` after the cached prefix and returns the next-token
    /// logits after the last of them.
    pub fn extend(&self, tokens: &[TokenId], cache: &mut [LayerCache]) -> Result<Vec<f64>> {
        let start = cache.first().map_or(0, LayerCache::len);
        if tokens.is_empty() || start + tokens.len() > self.config.max_positions {
            return Err(Error::ModelInput("sequence exceeds max_positions".into()));
        }
        check_tokens(&self.config, tokens)?;
        let mut tape = Tape::new(&self.store);
        let mut x = self.embed(&mut tape, tokens, start);
        let mut dropout = Dropout::off();
        let mut rows = Vec::with_capacity(self.layers.len());
        for (layer, c) in self.layers.iter().zip(cache.iter()) {
            let (out, k, v) = layer.forward(&mut tape, x, Some(c), None, &mut dropout);
            rows.push((k, v));
            x = out;
        }
        let logits = self.out.forward(&mut tape, x);
        for (c, (k, v)) in cache.iter_mut().zip(rows) {
            c.keys
                .append(ndarray::Axis(0), tape.value(k).view())
                .expect("widths agree");
            c.values
                .append(ndarray::Axis(0), tape.value(v).view())
                .expect("widths agree");
        }
        let value = tape.value(logits);
        Ok(value.row(value.nrows() - 1).to_vec())
    }

    pub fn to_checkpoint(&self, kind: &str, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(kind, meta);
        ck.push_store("", &self.store);
        ck
    }

    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = CausalLm::new(config)?;
        ck.restore_into("", &mut m.store)?;
        Ok(m)
    }
}

impl Parameterized for CausalLm {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}
