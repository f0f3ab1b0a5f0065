//! Label-conditioned encoder-decoder transformer.
//!
//! The encoder reads the partially masked sentence; each input row is the sum
//! of a token embedding, a label embedding and a sinusoidal position code.
//! The decoder regenerates the masked fragment left to right. At step `t` it
//! is fed the previous fragment token with the previous label and the
//! position of the token being predicted; its output state `z_t` is shifted by
//! the embedding of the current label before the vocabulary projection:
//!
//! ```text
//! s_t = z_t + label_emb(l_t)
//! P(y_t | y_<t, l_t, H) = softmax(W s_t + b)
//! ```
//!
//! Decoder positions are the absolute sentence positions `u..=v`, so encoder
//! and decoder share one coordinate frame.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::masking::MaskedExample;
use crate::nn::{
    log_softmax, positional_encoding, softmax_rows, Checkpoint, CrossKv, DecoderLayer, Dropout,
    EncoderLayer, Gradients, LayerCache, Mat, ParamBuilder, ParamId, ParamStore, Tape, Var,
};

/// Architecture hyper-parameters shared by every transformer in the crate.
///
/// Encoder-only models use `n_enc_layers`, decoder-only models use
/// `n_dec_layers`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub n_labels: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub param_seed: u64,
    /// When false the label table stays at zero and is frozen during training.
    #[serde(default = "default_true")]
    pub label_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Two encoder and two decoder layers, two heads, width 64, dropout 0.1.
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            d_model: 64,
            d_ff: 128,
            vocab_size,
            n_labels: 3,
            max_positions,
            dropout_rate: 0.1,
            param_seed: 0,
            label_embeddings: true,
        }
    }

    /// Six encoder and six decoder layers, twelve heads, width 768, filter 3072.
    pub fn paper(vocab_size: usize, max_positions: usize) -> Self {
        ModelConfig {
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 12,
            d_model: 768,
            d_ff: 3072,
            ..ModelConfig::desk(vocab_size, max_positions)
        }
    }

    pub fn preset(name: &str, vocab_size: usize, max_positions: usize) -> Result<Self> {
        match name {
            "desk" => Ok(ModelConfig::desk(vocab_size, max_positions)),
            "paper" => Ok(ModelConfig::paper(vocab_size, max_positions)),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_labels != 3 {
            return Err(Error::Config("n_labels must be 3 (B, I, O)".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Token-id view of a [`MaskedExample`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub source: Vec<TokenId>,
    pub labels: Vec<Label>,
    pub target: Vec<TokenId>,
    /// 1-based fragment start.
    pub u: usize,
}

impl TokenizedExample {
    pub fn from_masked(example: &MaskedExample, vocab: &Vocab) -> Self {
        TokenizedExample {
            source: vocab.encode(&example.masked_tokens),
            labels: example.labels.clone(),
            target: vocab.encode(&example.fragment),
            u: example.u,
        }
    }

    pub fn label_at(&self, pos: usize) -> Label {
        if pos == 0 {
            Label::O
        } else {
            self.labels[pos - 1]
        }
    }

    /// `(prev_token, prev_label, cur_label, position)` fed at step `t` (0-based).
    pub fn step_inputs(&self, t: usize) -> (TokenId, Label, Label, usize) {
        let prev = if t == 0 {
            Vocab::BOS
        } else {
            self.target[t - 1]
        };
        let pos = self.u + t; // 1-based position of the predicted token
        (prev, self.label_at(pos - 1), self.label_at(pos), pos - 1)
    }
}

/// Encoder output, one row per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedStates {
    pub h: Mat,
}

impl EncodedStates {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }
}

/// Encoder states projected into the keys and values of each decoder layer's
/// cross-attention. Computed once per sentence and shared by all hypotheses.
#[derive(Debug, Clone)]
pub struct CrossMemory {
    layers: Vec<(Mat, Mat)>,
}

/// Self-attention keys and values of the decoded prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCache {
    layers: Vec<LayerCache>,
    next_position: Option<usize>,
}

impl DecoderCache {
    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    label_emb: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
}

/// All learnable weights of the encoder-decoder.
#[derive(Debug, Clone)]
pub struct Seq2SeqParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
    positions: Mat,
}

impl Seq2SeqParams {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.param_seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let d = config.d_model;
        let tok_emb = pb.uniform("tok_emb", config.vocab_size, d);
        let label_emb = pb.zeros("label_emb", config.n_labels, d);
        let enc = (0..config.n_enc_layers)
            .map(|i| {
                EncoderLayer::build(&mut pb, &format!("enc{i}"), d, config.d_ff, config.n_heads)
            })
            .collect();
        let dec = (0..config.n_dec_layers)
            .map(|i| {
                DecoderLayer::build(
                    &mut pb,
                    &format!("dec{i}"),
                    d,
                    config.d_ff,
                    config.n_heads,
                    true,
                )
            })
            .collect();
        let out_w = pb.uniform("out_w", config.vocab_size, d);
        let out_b = pb.zeros("out_b", 1, config.vocab_size);
        Ok(Seq2SeqParams {
            config,
            store: pb.finish(),
            layout: Layout {
                tok_emb,
                label_emb,
                out_w,
                out_b,
                enc,
                dec,
            },
            positions: positional_encoding(config.max_positions, d),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn label_embedding(&self) -> ParamId {
        self.layout.label_emb
    }

    pub fn output_projection(&self) -> (ParamId, ParamId) {
        (self.layout.out_w, self.layout.out_b)
    }

    /// Parameters excluded from optimization under this configuration.
    pub fn frozen(&self) -> Vec<ParamId> {
        if self.config.label_embeddings {
            Vec::new()
        } else {
            vec![self.layout.label_emb]
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::ModelInput(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_source(&self, source: &[TokenId], labels: &[Label]) -> Result<()> {
        if source.is_empty() {
            return Err(Error::ModelInput("empty input".into()));
        }
        if source.len() != labels.len() {
            return Err(Error::ModelInput(format!(
                "{} tokens but {} labels",
                source.len(),
                labels.len()
            )));
        }
        if source.len() > self.config.max_positions {
            return Err(Error::ModelInput(format!(
                "input length {} exceeds max_positions {}",
                source.len(),
                self.config.max_positions
            )));
        }
        self.check_ids(source)
    }

    fn check_example(&self, ex: &TokenizedExample) -> Result<()> {
        self.check_source(&ex.source, &ex.labels)?;
        self.check_ids(&ex.target)?;
        if ex.target.is_empty() || ex.u == 0 || ex.u + ex.target.len() - 1 > ex.source.len() {
            return Err(Error::ModelInput(format!(
                "fragment of length {} at {} does not fit a sentence of {}",
                ex.target.len(),
                ex.u,
                ex.source.len()
            )));
        }
        Ok(())
    }

    fn embed(
        &self,
        tape: &mut Tape,
        tokens: &[TokenId],
        labels: &[Label],
        first_position: usize,
    ) -> Var {
        let tok = tape.param(self.layout.tok_emb);
        let lab = tape.param(self.layout.label_emb);
        let t = tape.gather(tok, tokens);
        let label_ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
        let l = tape.gather(lab, &label_ids);
        let pos = self
            .positions
            .slice(ndarray::s![
                first_position..first_position + tokens.len(),
                ..
            ])
            .to_owned();
        let p = tape.constant(pos);
        let x = tape.add(t, l);
        tape.add(x, p)
    }

    /// Encoder forward pass recorded on `tape`.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        source: &[TokenId],
        labels: &[Label],
        dropout: &mut Dropout,
    ) -> Var {
        let x = self.embed(tape, source, labels, 0);
        let mut x = dropout.apply(tape, x);
        for layer in &self.layout.enc {
            x = layer.forward(tape, x, dropout);
        }
        x
    }

    pub fn encode(&self, source: &[TokenId], labels: &[Label]) -> Result<EncodedStates> {
        self.check_source(source, labels)?;
        let mut tape = Tape::new(&self.store);
        let h = self.encode_on(&mut tape, source, labels, &mut Dropout::off());
        Ok(EncodedStates {
            h: tape.value(h).clone(),
        })
    }

    /// Teacher-forced decoder pass; returns `m × vocab` logits.
    fn decode_on(
        &self,
        tape: &mut Tape,
        h: Var,
        ex: &TokenizedExample,
        dropout: &mut Dropout,
    ) -> Var {
        let m = ex.target.len();
        let mut prev_tokens = Vec::with_capacity(m);
        let mut prev_labels = Vec::with_capacity(m);
        let mut cur_labels = Vec::with_capacity(m);
        for t in 0..m {
            let (tok, pl, cl, _) = ex.step_inputs(t);
            prev_tokens.push(tok);
            prev_labels.push(pl);
            cur_labels.push(cl.index());
        }
        let x = self.embed(tape, &prev_tokens, &prev_labels, ex.u - 1);
        let mut x = dropout.apply(tape, x);
        for layer in &self.layout.dec {
            let (attn, _) = layer
                .cross
                .as_ref()
                .expect("decoder layers have cross-attention");
            let (keys, values) = attn.project_kv(tape, h);
            let (out, _, _) = layer.forward(tape, x, None, Some(CrossKv { keys, values }), dropout);
            x = out;
        }
        self.project(tape, x, &cur_labels)
    }

    fn project(&self, tape: &mut Tape, z: Var, cur_labels: &[usize]) -> Var {
        let lab = tape.param(self.layout.label_emb);
        let cur = tape.gather(lab, cur_labels);
        let s = tape.add(z, cur);
        let w = tape.param(self.layout.out_w);
        let b = tape.param(self.layout.out_b);
        let logits = tape.matmul_t(s, w);
        tape.add_row(logits, b)
    }

    fn log_prob_on(&self, tape: &mut Tape, ex: &TokenizedExample, dropout: &mut Dropout) -> Var {
        let h = self.encode_on(tape, &ex.source, &ex.labels, dropout);
        let logits = self.decode_on(tape, h, ex, dropout);
        let targets: Vec<Option<usize>> = ex.target.iter().map(|&t| Some(t)).collect();
        tape.log_softmax_pick(logits, &targets)
    }

    /// `Σ_t log P(y_t | y_<t, l_t, H)` under teacher forcing.
    pub fn sequence_log_prob(&self, ex: &TokenizedExample) -> Result<f64> {
        self.check_example(ex)?;
        let mut tape = Tape::new(&self.store);
        let lp = self.log_prob_on(&mut tape, ex, &mut Dropout::off());
        Ok(tape.scalar(lp))
    }

    /// Per-step output distributions of the teacher-forced pass, `m × vocab`.
    pub fn teacher_forced_probs(&self, ex: &TokenizedExample) -> Result<Mat> {
        self.check_example(ex)?;
        let mut tape = Tape::new(&self.store);
        let h = self.encode_on(&mut tape, &ex.source, &ex.labels, &mut Dropout::off());
        let logits = self.decode_on(&mut tape, h, ex, &mut Dropout::off());
        Ok(softmax_rows(tape.value(logits)))
    }

    /// Mean negative log-likelihood per fragment token and its exact gradient.
    ///
    /// `dropout_seed` seeds per-example dropout masks; it is ignored when the
    /// configured rate is zero.
    pub fn loss_and_gradients(
        &self,
        batch: &[TokenizedExample],
        dropout_seed: u64,
    ) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::ModelInput("empty batch".into()));
        }
        for ex in batch {
            self.check_example(ex)?;
        }
        let total_tokens: usize = batch.iter().map(|e| e.target.len()).sum();
        let seed = -1.0 / total_tokens as f64;
        let rate = self.config.dropout_rate;
        let parts: Vec<(f64, Gradients)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ex)| {
                let mut grads = self.store.zeros_like();
                let mut tape = Tape::new(&self.store);
                let mut dropout = Dropout::new(rate, dropout_seed.wrapping_add(i as u64));
                let lp = self.log_prob_on(&mut tape, ex, &mut dropout);
                tape.backward(lp, seed, &mut grads);
                (tape.scalar(lp), grads)
            })
            .collect();
        let mut iter = parts.into_iter();
        let (mut log_prob, mut grads) = iter.next().expect("non-empty batch");
        for (lp, g) in iter {
            log_prob += lp;
            grads.add_assign(&g);
        }
        Ok((-log_prob / total_tokens as f64, grads))
    }

    /// Projects encoder states into per-layer cross-attention keys and values.
    pub fn cross_memory(&self, states: &EncodedStates) -> CrossMemory {
        let mut tape = Tape::new(&self.store);
        let h = tape.constant(states.h.clone());
        let layers = self
            .layout
            .dec
            .iter()
            .map(|layer| {
                let (attn, _) = layer.cross.as_ref().expect("cross-attention");
                let (k, v) = attn.project_kv(&mut tape, h);
                (tape.value(k).clone(), tape.value(v).clone())
            })
            .collect();
        CrossMemory { layers }
    }

    pub fn empty_cache(&self) -> DecoderCache {
        DecoderCache {
            layers: vec![LayerCache::empty(self.config.d_model); self.layout.dec.len()],
            next_position: None,
        }
    }

    /// One incremental decoder step returning output logits. `position` is the
    /// 0-based sentence position of the token being predicted.
    pub fn decode_step_logits(
        &self,
        prev_token: TokenId,
        prev_label: Label,
        cur_label: Label,
        position: usize,
        memory: &CrossMemory,
        cache: &mut DecoderCache,
    ) -> Result<Vec<f64>> {
        self.check_ids(&[prev_token])?;
        if position >= self.config.max_positions {
            return Err(Error::ModelInput(format!(
                "position {position} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        if cache.layers.len() != self.layout.dec.len()
            || memory.layers.len() != self.layout.dec.len()
        {
            return Err(Error::ModelInput(
                "cache does not match decoder depth".into(),
            ));
        }
        let steps = cache.steps();
        if cache.layers.iter().any(|l| l.len() != steps) {
            return Err(Error::ModelInput(
                "inconsistent cache lengths across layers".into(),
            ));
        }
        match cache.next_position {
            Some(expected) if expected != position => {
                return Err(Error::ModelInput(format!(
                "cache holds a prefix ending before position {expected}, got position {position}"
            )))
            }
            None if steps != 0 => {
                return Err(Error::ModelInput("cache has rows but no position".into()))
            }
            _ => {}
        }

        let mut tape = Tape::new(&self.store);
        let mut x = self.embed(&mut tape, &[prev_token], &[prev_label], position);
        let mut dropout = Dropout::off();
        let mut new_rows = Vec::with_capacity(self.layout.dec.len());
        for (i, layer) in self.layout.dec.iter().enumerate() {
            let (mk, mv) = &memory.layers[i];
            let keys = tape.constant(mk.clone());
            let values = tape.constant(mv.clone());
            let (out, k, v) = layer.forward(
                &mut tape,
                x,
                Some(&cache.layers[i]),
                Some(CrossKv { keys, values }),
                &mut dropout,
            );
            new_rows.push((k, v));
            x = out;
        }
        let logits = self.project(&mut tape, x, &[cur_label.index()]);
        for (layer_cache, (k, v)) in cache.layers.iter_mut().zip(new_rows) {
            append_rows(&mut layer_cache.keys, tape.value(k));
            append_rows(&mut layer_cache.values, tape.value(v));
        }
        cache.next_position = Some(position + 1);
        Ok(tape.value(logits).row(0).to_vec())
    }

    /// One incremental decoder step returning the output distribution.
    pub fn decode_step(
        &self,
        prev_token: TokenId,
        prev_label: Label,
        cur_label: Label,
        position: usize,
        memory: &CrossMemory,
        cache: &mut DecoderCache,
    ) -> Result<Vec<f64>> {
        let logits =
            self.decode_step_logits(prev_token, prev_label, cur_label, position, memory, cache)?;
        Ok(log_softmax(&logits).into_iter().map(f64::exp).collect())
    }

    pub fn to_checkpoint(&self, kind: &str, meta: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(kind, meta);
        ck.push_store("", &self.store);
        ck
    }

    /// Rebuilds parameters for `config` and fills them from `ck`.
    pub fn from_checkpoint(config: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut params = Seq2SeqParams::new(config)?;
        ck.restore_into("", &mut params.store)?;
        Ok(params)
    }
}

fn append_rows(dst: &mut Mat, rows: &Mat) {
    dst.append(ndarray::Axis(0), rows.view())
        .expect("row widths agree");
}

/// Parameters together with the vocabulary they were trained on.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub params: Seq2SeqParams,
    pub vocab: Vocab,
}

pub const SEQ2SEQ_KIND: &str = "seq2seq";

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    vocab: Vocab,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "config vocab_size {} != vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Seq2SeqModel {
            params: Seq2SeqParams::new(config)?,
            vocab,
        })
    }

    pub fn tokenize(&self, example: &MaskedExample) -> TokenizedExample {
        TokenizedExample::from_masked(example, &self.vocab)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(ModelMeta {
            config: *self.params.config(),
            vocab: self.vocab.clone(),
        })
        .expect("meta serializes");
        self.params.to_checkpoint(SEQ2SEQ_KIND, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != SEQ2SEQ_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {SEQ2SEQ_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.config.vocab_size != meta.vocab.len() {
            return Err(Error::Checkpoint("vocabulary does not match config".into()));
        }
        Ok(Seq2SeqModel {
            params: Seq2SeqParams::from_checkpoint(meta.config, ck)?,
            vocab: meta.vocab,
        })
    }

    /// Content hash of the serialized checkpoint.
    pub fn hash(&self) -> String {
        self.to_checkpoint().hash()
    }
}
