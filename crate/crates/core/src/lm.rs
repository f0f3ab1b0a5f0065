//! Causal language models over a corpus vocabulary.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Corpus, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::nn::{CausalLm, Checkpoint, LmExample};
use crate::seq2seq::ModelConfig;
use crate::trainer::{fit_seeded, TrainConfig};

/// A [`CausalLm`] with its vocabulary and a kind tag naming its input format.
#[derive(Debug, Clone)]
pub struct TokenLm {
    pub kind: String,
    pub lm: CausalLm,
    pub vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    config: ModelConfig,
    vocab: Vocab,
}

impl TokenLm {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(LmMeta {
            config: *self.lm.config(),
            vocab: self.vocab.clone(),
        })
        .expect("meta serializes");
        self.lm.to_checkpoint(&self.kind, meta)
    }

    pub fn from_checkpoint(kind: &str, ck: &Checkpoint) -> Result<Self> {
        if ck.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let meta: LmMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.config.vocab_size != meta.vocab.len() {
            return Err(Error::Checkpoint("vocabulary does not match config".into()));
        }
        Ok(TokenLm {
            kind: kind.into(),
            lm: CausalLm::from_checkpoint(meta.config, ck)?,
            vocab: meta.vocab,
        })
    }

    pub fn hash(&self) -> String {
        self.to_checkpoint().hash()
    }

    /// Builds the vocabulary from `corpus`, encodes every sentence with
    /// `encode` into `(sequence, first scored index)` and fits the model on
    /// uniformly drawn batches.
    pub fn train<F>(
        kind: &str,
        corpus: &Corpus,
        model_config: ModelConfig,
        train: &TrainConfig,
        encode: F,
    ) -> Result<Self>
    where
        F: Fn(&Vocab, &crate::corpus::LabeledSentence) -> (Vec<TokenId>, usize),
    {
        if corpus.is_empty() {
            return Err(Error::Config(
                "cannot train a language model on an empty corpus".into(),
            ));
        }
        let vocab = build_vocab(corpus, 1);
        let examples: Vec<LmExample> = corpus
            .iter()
            .map(|s| {
                let (seq, from) = encode(&vocab, s);
                LmExample::next_token(&seq, from)
            })
            .collect();
        let longest = examples.iter().map(|e| e.tokens.len()).max().unwrap_or(1);
        let config = ModelConfig {
            vocab_size: vocab.len(),
            max_positions: model_config.max_positions.max(longest + 1),
            ..model_config
        };
        let mut lm = CausalLm::new(config)?;
        fit_seeded(&mut lm, train, |m, rng, dropout_seed| {
            let batch: Vec<LmExample> = (0..train.batch_size)
                .map(|_| examples[rng.gen_range(0..examples.len())].clone())
                .collect();
            m.loss_and_gradients(&batch, dropout_seed)
        })?;
        Ok(TokenLm {
            kind: kind.into(),
            lm,
            vocab,
        })
    }
}
