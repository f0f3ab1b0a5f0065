//! Contrast augmenters: synonym replacement, independent masked-token
//! infilling and prefix-conditioned left-to-right generation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmenter::{filter_variants, rank, Augmenter, SentenceVariants, VariantRecord};
use crate::corpus::{build_vocab, Corpus, Label, LabeledSentence, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::lm::TokenLm;
use crate::masking::round_half_up;
use crate::nn::{log_softmax, Checkpoint, EncoderHead, HeadExample, LayerCache};
use crate::seq2seq::ModelConfig;
use crate::trainer::{fit_seeded, TrainConfig};

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(Error::Config(format!("fraction {f} is outside [0, 1]")))
    }
}

fn sentence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// `count` O-labeled positions (0-based, ascending) chosen uniformly among
/// those accepted by `eligible`; fewer if not enough qualify.
fn choose_positions(
    sentence: &LabeledSentence,
    count: usize,
    eligible: impl Fn(usize) -> bool,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let pool: Vec<usize> = (0..sentence.len())
        .filter(|&p| sentence.labels()[p] == Label::O && eligible(p))
        .collect();
    if count >= pool.len() {
        return pool;
    }
    let mut chosen: Vec<usize> = sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Word to synonym list, matched case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Thesaurus {
    entries: BTreeMap<String, Vec<String>>,
}

impl Thesaurus {
    /// Parses lines of the form `word<TAB>syn1,syn2,...`. Blank lines and
    /// lines starting with `#` are skipped; repeated words merge.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: &str| Error::Parse {
                line: i + 1,
                message: message.into(),
            };
            let (word, syns) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `word<TAB>synonyms`"))?;
            let word = word.trim().to_lowercase();
            if word.is_empty() {
                return Err(err("empty headword"));
            }
            let syns: Vec<String> = syns
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect();
            if syns.is_empty() {
                return Err(err("no synonyms listed"));
            }
            let list = entries.entry(word).or_default();
            for s in syns {
                if !list.contains(&s) {
                    list.push(s);
                }
            }
        }
        Ok(Thesaurus { entries })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Thesaurus::parse(&text)
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Replaces `round(replace_fraction * n)` O-labeled tokens that have
/// thesaurus entries with a uniformly drawn synonym.
pub fn synonym_augment(
    sentence: &LabeledSentence,
    thesaurus: &Thesaurus,
    replace_fraction: f64,
    rng: &mut impl Rng,
) -> Result<LabeledSentence> {
    check_fraction(replace_fraction)?;
    let count = round_half_up(replace_fraction * sentence.len() as f64);
    let positions = choose_positions(
        sentence,
        count,
        |p| thesaurus.lookup(&sentence.tokens()[p]).is_some(),
        rng,
    );
    let mut tokens = sentence.tokens().to_vec();
    for p in positions {
        let syns = thesaurus
            .lookup(&tokens[p])
            .expect("eligible positions have entries");
        tokens[p] = syns[rng.gen_range(0..syns.len())].clone();
    }
    sentence.with_tokens(tokens)
}

pub struct SynonymAugmenter<'t> {
    pub thesaurus: &'t Thesaurus,
    pub replace_fraction: f64,
    pub variants: usize,
    pub seed: u64,
}

impl Augmenter for SynonymAugmenter<'_> {
    fn strategy(&self) -> &str {
        "synonym"
    }

    fn augment(&self, index: usize, sentence: &LabeledSentence) -> Result<SentenceVariants> {
        let mut rng = sentence_rng(self.seed, index);
        let raw = (0..self.variants)
            .map(|_| {
                let s = synonym_augment(sentence, self.thesaurus, self.replace_fraction, &mut rng)?;
                Ok((
                    s,
                    VariantRecord {
                        strategy: self.strategy().into(),
                        source_index: index,
                        r: Some(self.replace_fraction),
                        ..Default::default()
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(filter_variants(sentence, raw, true, false))
    }
}

pub const INFILL_KIND: &str = "indep-mask";

/// Encoder-only masked-token predictor conditioned on the label sequence.
#[derive(Debug, Clone)]
pub struct InfillModel {
    pub head: EncoderHead,
    pub vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct VocabMeta {
    config: ModelConfig,
    vocab: Vocab,
}

impl InfillModel {
    pub fn new(config: ModelConfig, vocab: Vocab) -> Result<Self> {
        let config = ModelConfig {
            vocab_size: vocab.len(),
            ..config
        };
        Ok(InfillModel {
            head: EncoderHead::new(config, vocab.len(), true)?,
            vocab,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::to_value(VocabMeta {
            config: *self.head.config(),
            vocab: self.vocab.clone(),
        })
        .expect("meta serializes");
        self.head.to_checkpoint(INFILL_KIND, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != INFILL_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {INFILL_KIND} checkpoint, found `{}`",
                ck.kind
            )));
        }
        let meta: VocabMeta = serde_json::from_value(ck.meta.clone())?;
        Ok(InfillModel {
            head: EncoderHead::from_checkpoint(meta.config, meta.vocab.len(), true, ck)?,
            vocab: meta.vocab,
        })
    }

    pub fn hash(&self) -> String {
        self.to_checkpoint().hash()
    }

    /// Most probable non-special token at each of `positions`, all read from
    /// one pass over `tokens`.
    fn predict(
        &self,
        tokens: &[TokenId],
        labels: &[Label],
        positions: &[usize],
    ) -> Result<Vec<TokenId>> {
        let logits = self.head.logits(tokens, labels)?;
        Ok(positions
            .iter()
            .map(|&p| {
                let row = logits.row(p);
                (Vocab::NUM_SPECIAL..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .unwrap_or(Vocab::UNK)
            })
            .collect())
    }

    fn masked_input(&self, sentence: &LabeledSentence, positions: &[usize]) -> Vec<TokenId> {
        let mut ids = self.vocab.encode(sentence.tokens());
        for &p in positions {
            ids[p] = Vocab::MASK;
        }
        ids
    }

    /// Masks `positions` together and fills each from the same masked input.
    pub fn infill_independent(
        &self,
        sentence: &LabeledSentence,
        positions: &[usize],
    ) -> Result<LabeledSentence> {
        let input = self.masked_input(sentence, positions);
        let predicted = self.predict(&input, sentence.labels(), positions)?;
        let mut tokens = sentence.tokens().to_vec();
        for (&p, &id) in positions.iter().zip(&predicted) {
            tokens[p] = self.vocab.token(id).to_string();
        }
        sentence.with_tokens(tokens)
    }

    /// Fills `positions` left to right, re-reading the sentence after every
    /// prediction so later positions see earlier fills.
    pub fn infill_sequential(
        &self,
        sentence: &LabeledSentence,
        positions: &[usize],
    ) -> Result<LabeledSentence> {
        let mut input = self.masked_input(sentence, positions);
        let mut tokens = sentence.tokens().to_vec();
        for &p in positions {
            let id = self.predict(&input, sentence.labels(), &[p])?[0];
            input[p] = id;
            tokens[p] = self.vocab.token(id).to_string();
        }
        sentence.with_tokens(tokens)
    }
}

/// Picks the positions [`independent_mask_augment`] would mask.
pub fn infill_positions(
    sentence: &LabeledSentence,
    mask_fraction: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let count = round_half_up(mask_fraction * sentence.len() as f64);
    choose_positions(sentence, count, |_| true, rng)
}

/// Masks `round(mask_fraction * n)` O-labeled tokens individually and
/// replaces each with its most probable token given the masked sentence.
pub fn independent_mask_augment(
    model: &InfillModel,
    sentence: &LabeledSentence,
    mask_fraction: f64,
    rng: &mut impl Rng,
) -> Result<LabeledSentence> {
    check_fraction(mask_fraction)?;
    let positions = infill_positions(sentence, mask_fraction, rng);
    model.infill_independent(sentence, &positions)
}

/// Trains the infill model to recover individually masked O-labeled tokens,
/// masking `train.mask_proportion` of each sentence.
pub fn train_infill(
    corpus: &Corpus,
    config: ModelConfig,
    train: &TrainConfig,
) -> Result<InfillModel> {
    let candidates: Vec<&LabeledSentence> = corpus
        .iter()
        .filter(|s| s.labels().contains(&Label::O))
        .collect();
    if candidates.is_empty() {
        return Err(Error::NothingToSample { min_length: 0 });
    }
    let config = ModelConfig {
        max_positions: config.max_positions.max(corpus.max_len()),
        ..config
    };
    let mut model = InfillModel::new(config, build_vocab(corpus, 1))?;
    let vocab = model.vocab.clone();
    fit_seeded(&mut model.head, train, |head, rng, dropout_seed| {
        let batch: Vec<HeadExample> = (0..train.batch_size)
            .map(|_| {
                let s = candidates[rng.gen_range(0..candidates.len())];
                let count = round_half_up(train.mask_proportion * s.len() as f64).max(1);
                let positions = choose_positions(s, count, |_| true, rng);
                let original = vocab.encode(s.tokens());
                let mut tokens = original.clone();
                let mut targets = vec![None; s.len()];
                for p in positions {
                    tokens[p] = Vocab::MASK;
                    targets[p] = Some(original[p]);
                }
                HeadExample {
                    tokens,
                    labels: s.labels().to_vec(),
                    targets,
                }
            })
            .collect();
        head.loss_and_gradients(&batch, dropout_seed)
    })?;
    Ok(model)
}

pub struct IndepMaskAugmenter<'m> {
    pub model: &'m InfillModel,
    pub mask_fraction: f64,
    pub variants: usize,
    pub seed: u64,
    pub model_hash: String,
}

impl<'m> IndepMaskAugmenter<'m> {
    pub fn new(
        model: &'m InfillModel,
        mask_fraction: f64,
        variants: usize,
        seed: u64,
    ) -> Result<Self> {
        check_fraction(mask_fraction)?;
        Ok(IndepMaskAugmenter {
            model,
            mask_fraction,
            variants,
            seed,
            model_hash: model.hash(),
        })
    }
}

impl Augmenter for IndepMaskAugmenter<'_> {
    fn strategy(&self) -> &str {
        "indep-mask"
    }

    fn augment(&self, index: usize, sentence: &LabeledSentence) -> Result<SentenceVariants> {
        let mut rng = sentence_rng(self.seed, index);
        let raw = (0..self.variants)
            .map(|_| {
                let s =
                    independent_mask_augment(self.model, sentence, self.mask_fraction, &mut rng)?;
                Ok((
                    s,
                    VariantRecord {
                        strategy: self.strategy().into(),
                        source_index: index,
                        r: Some(self.mask_fraction),
                        model_hash: Some(self.model_hash.clone()),
                        ..Default::default()
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(filter_variants(sentence, raw, true, false))
    }
}

pub const PREFIX_KIND: &str = "prefix-lm";

/// `[ASP] a1 [ASP] a2 ... [BOS]` built from the sentence's aspect terms.
pub fn control_prefix(sentence: &LabeledSentence) -> Vec<String> {
    let mut out = Vec::new();
    for term in sentence.aspect_terms() {
        out.push(Vocab::SPECIAL_TOKENS[Vocab::ASP].to_string());
        out.extend(term.iter().cloned());
    }
    out.push(Vocab::SPECIAL_TOKENS[Vocab::BOS].to_string());
    out
}

/// Control prefix, sentence and `[EOS]` as ids, with the index of the first
/// sentence token.
pub fn prefix_sequence(vocab: &Vocab, sentence: &LabeledSentence) -> (Vec<TokenId>, usize) {
    let mut ids = vocab.encode(&control_prefix(sentence));
    let start = ids.len();
    ids.extend(vocab.encode(sentence.tokens()));
    ids.push(Vocab::EOS);
    (ids, start)
}

/// Trains the prefix-conditioned language model; the loss covers the
/// sentence and its end marker, not the control prefix.
pub fn train_prefix_lm(
    corpus: &Corpus,
    config: ModelConfig,
    train: &TrainConfig,
) -> Result<TokenLm> {
    TokenLm::train(PREFIX_KIND, corpus, config, train, prefix_sequence)
}

/// Beam search continuation of `context` for exactly `steps` tokens.
/// Returns the ids and their summed log-probability.
pub fn lm_beam_search(
    model: &TokenLm,
    context: &[TokenId],
    steps: usize,
    beam_size: usize,
) -> Result<(Vec<TokenId>, f64)> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    if steps == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let mut cache = model.lm.empty_cache();
    let first = model.lm.extend(context, &mut cache)?;
    // (tokens, score, cache, next-token log-probabilities)
    type Beam = (Vec<TokenId>, f64, Vec<LayerCache>, Vec<f64>);
    let mut beams: Vec<Beam> = vec![(Vec::new(), 0.0, cache, log_softmax(&first))];
    for step in 0..steps {
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (h, (_, lp, _, next)) in beams.iter().enumerate() {
            candidates.extend(next.iter().enumerate().map(|(tok, l)| (h, tok, lp + l)));
        }
        let key = |&(h, tok, _): &(usize, TokenId, f64)| {
            let mut seq = beams[h].0.clone();
            seq.push(tok);
            seq
        };
        candidates.sort_by(|a, b| rank(a.2, &key(a), b.2, &key(b)));
        candidates.truncate(beam_size);
        let last = step + 1 == steps;
        beams = candidates
            .into_iter()
            .map(|(h, tok, lp)| {
                let (parent, _, cache, _) = &beams[h];
                let mut tokens = parent.clone();
                tokens.push(tok);
                let mut cache = cache.clone();
                let next = if last {
                    Vec::new()
                } else {
                    log_softmax(&model.lm.extend(&[tok], &mut cache)?)
                };
                Ok((tokens, lp, cache, next))
            })
            .collect::<Result<_>>()?;
    }
    let (tokens, lp, _, _) = beams.swap_remove(0);
    Ok((tokens, lp))
}

/// Result of [`prefix_augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixOutput {
    pub sentence: LabeledSentence,
    /// Generated positions (0-based) where a control token was replaced by `[UNK]`.
    pub replaced: Vec<usize>,
}

/// Keeps the first `ceil(n/2)` tokens, generates the rest after the control
/// prefix and attaches the original labels unchanged.
pub fn prefix_augment(
    model: &TokenLm,
    sentence: &LabeledSentence,
    beam_size: usize,
) -> Result<PrefixOutput> {
    let n = sentence.len();
    let kept = n.div_ceil(2);
    let mut context = model.vocab.encode(&control_prefix(sentence));
    context.extend(model.vocab.encode(&sentence.tokens()[..kept]));
    let (generated, _) = lm_beam_search(model, &context, n - kept, beam_size)?;
    let mut tokens = sentence.tokens()[..kept].to_vec();
    let mut replaced = Vec::new();
    for (i, &id) in generated.iter().enumerate() {
        if Vocab::is_special(id) {
            replaced.push(kept + i);
            tokens.push(Vocab::SPECIAL_TOKENS[Vocab::UNK].to_string());
        } else {
            tokens.push(model.vocab.token(id).to_string());
        }
    }
    Ok(PrefixOutput {
        sentence: sentence.with_tokens(tokens)?,
        replaced,
    })
}

pub struct PrefixAugmenter<'m> {
    pub model: &'m TokenLm,
    pub beam_size: usize,
    pub model_hash: String,
}

impl<'m> PrefixAugmenter<'m> {
    pub fn new(model: &'m TokenLm, beam_size: usize) -> Self {
        PrefixAugmenter {
            model,
            beam_size,
            model_hash: model.hash(),
        }
    }
}

impl Augmenter for PrefixAugmenter<'_> {
    fn strategy(&self) -> &str {
        "prefix-lm"
    }

    fn augment(&self, index: usize, sentence: &LabeledSentence) -> Result<SentenceVariants> {
        let out = prefix_augment(self.model, sentence, self.beam_size)?;
        let n = sentence.len();
        let record = VariantRecord {
            strategy: self.strategy().into(),
            source_index: index,
            u: Some(n.div_ceil(2) + 1),
            v: Some(n),
            beam_size: Some(self.beam_size),
            model_hash: Some(self.model_hash.clone()),
            flags: if out.replaced.is_empty() {
                Vec::new()
            } else {
                vec!["control-token-replaced".into()]
            },
            ..Default::default()
        };
        Ok(filter_variants(
            sentence,
            vec![(out.sentence, record)],
            false,
            false,
        ))
    }
}

/// True when `augmented` changed a token at a non-O position of `source`.
pub fn violates_labels(source: &LabeledSentence, augmented: &LabeledSentence) -> bool {
    source.labels() != augmented.labels()
        || source
            .labels()
            .iter()
            .zip(source.tokens().iter().zip(augmented.tokens()))
            .any(|(l, (a, b))| *l != Label::O && a != b)
}
