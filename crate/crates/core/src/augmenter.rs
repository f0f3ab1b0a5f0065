//! Generation-time augmentation: constrained beam search over a masked
//! fragment, several start positions per sentence, and assembly of the
//! generated corpora into enlarged training sets.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, LabeledSentence, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::masking::{mask_fragment, start_range, validate_proportion};
use crate::nn::log_softmax;
use crate::seq2seq::{CrossMemory, DecoderCache, Seq2SeqModel, Seq2SeqParams, TokenizedExample};

/// A partial fragment during beam search.
#[derive(Debug, Clone)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    cache: DecoderCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
}

/// Higher score first; equal scores fall back to the lexicographically
/// smaller token sequence so results never depend on evaluation order.
pub(crate) fn rank(a_lp: f64, a_tokens: &[TokenId], b_lp: f64, b_tokens: &[TokenId]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_tokens.cmp(b_tokens))
}

/// Beam search over the masked fragment of `ex`, scoring by summed
/// log-probability. Positions whose label is not O must reproduce the
/// original token; tokens in `banned` are never proposed elsewhere.
///
/// With `beam_size > 1` the greedy path is also decoded and kept if it
/// scores higher, so a wider beam never returns a worse fragment than
/// greedy decoding.
pub fn constrained_beam_search(
    params: &Seq2SeqParams,
    ex: &TokenizedExample,
    beam_size: usize,
    banned: &[TokenId],
) -> Result<BeamResult> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let states = params.encode(&ex.source, &ex.labels)?;
    let memory = params.cross_memory(&states);
    let best = beam(params, ex, &memory, beam_size, banned)?;
    if beam_size == 1 {
        return Ok(best);
    }
    let greedy = beam(params, ex, &memory, 1, banned)?;
    Ok(
        match rank(best.log_prob, &best.tokens, greedy.log_prob, &greedy.tokens) {
            Ordering::Greater => greedy,
            _ => best,
        },
    )
}

fn beam(
    params: &Seq2SeqParams,
    ex: &TokenizedExample,
    memory: &CrossMemory,
    beam_size: usize,
    banned: &[TokenId],
) -> Result<BeamResult> {
    let vocab_size = params.config().vocab_size;
    let mut allowed = vec![true; vocab_size];
    for &b in banned {
        if b < vocab_size {
            allowed[b] = false;
        }
    }

    let mut beams = vec![Hypothesis {
        tokens: Vec::with_capacity(ex.target.len()),
        log_prob: 0.0,
        cache: params.empty_cache(),
    }];
    for t in 0..ex.target.len() {
        let (bos, prev_label, cur_label, position) = ex.step_inputs(t);
        let forced = (cur_label != Label::O).then(|| ex.target[t]);
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (h, hyp) in beams.iter_mut().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(bos);
            let logits = params.decode_step_logits(
                prev,
                prev_label,
                cur_label,
                position,
                memory,
                &mut hyp.cache,
            )?;
            let lp = log_softmax(&logits);
            match forced {
                Some(tok) => candidates.push((h, tok, hyp.log_prob + lp[tok])),
                None => candidates.extend(
                    (0..vocab_size)
                        .filter(|&tok| allowed[tok])
                        .map(|tok| (h, tok, hyp.log_prob + lp[tok])),
                ),
            }
        }
        assert!(!candidates.is_empty(), "every candidate token is banned");
        let key = |&(h, tok, _): &(usize, TokenId, f64)| {
            let mut seq = beams[h].tokens.clone();
            seq.push(tok);
            seq
        };
        // Sequences are only built to break exact score ties.
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| key(a).cmp(&key(b))));
        candidates.truncate(beam_size);
        beams = candidates
            .into_iter()
            .map(|(h, tok, lp)| {
                let parent = &beams[h];
                let mut tokens = parent.tokens.clone();
                tokens.push(tok);
                Hypothesis {
                    tokens,
                    log_prob: lp,
                    cache: parent.cache.clone(),
                }
            })
            .collect();
    }
    let best = beams.swap_remove(0);
    Ok(BeamResult {
        tokens: best.tokens,
        log_prob: best.log_prob,
    })
}

/// How the start positions of a sentence's variants are chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartPolicy {
    /// Spread evenly over the valid range `[1, n - m + 1]`, endpoints included.
    EvenlySpaced,
    /// Distinct starts drawn uniformly, seeded per sentence.
    SeededRandom,
    /// Fixed 1-based starts; ones outside the valid range are skipped.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub r: f64,
    pub beam_size: usize,
    pub variants: usize,
    pub start_policy: StartPolicy,
    /// Drop a variant identical to an earlier variant of the same sentence.
    pub dedup: bool,
    /// Drop a variant identical to its source sentence.
    pub forbid_identical: bool,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            r: 0.5,
            beam_size: 5,
            variants: 4,
            start_policy: StartPolicy::EvenlySpaced,
            dedup: true,
            forbid_identical: false,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.variants == 0 {
            return Err(Error::Config("variants must be at least 1".into()));
        }
        validate_proportion(self.r)
    }
}

/// Start positions for a sentence with `range` valid starts.
pub fn choose_starts(
    policy: &StartPolicy,
    range: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    match policy {
        StartPolicy::EvenlySpaced if k >= range => (1..=range).collect(),
        StartPolicy::EvenlySpaced if k == 1 => vec![1],
        StartPolicy::EvenlySpaced => (0..k)
            .map(|j| 1 + (2 * j * (range - 1) + (k - 1)) / (2 * (k - 1)))
            .collect(),
        StartPolicy::SeededRandom => {
            let mut starts: Vec<usize> = rand::seq::index::sample(rng, range, k.min(range))
                .into_iter()
                .map(|i| i + 1)
                .collect();
            starts.sort_unstable();
            starts
        }
        StartPolicy::Explicit(list) => list
            .iter()
            .copied()
            .filter(|&u| (1..=range).contains(&u))
            .unique()
            .take(k)
            .collect(),
    }
}

/// Metadata for one generated (or dropped) variant. Written one JSON object
/// per line next to the generated corpora.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub strategy: String,
    pub source_index: usize,
    /// Generated corpus this sentence was placed in; `None` when dropped.
    pub set: Option<usize>,
    pub u: Option<usize>,
    pub v: Option<usize>,
    pub r: Option<f64>,
    pub beam_size: Option<usize>,
    pub model_hash: Option<String>,
    pub log_prob: Option<f64>,
    pub identical_to_source: bool,
    /// Why the variant was discarded, if it was.
    pub dropped: Option<String>,
    /// The slot holds the unchanged source because no variant was left.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Output of augmenting a single sentence.
#[derive(Debug, Clone, Default)]
pub struct SentenceVariants {
    pub kept: Vec<(LabeledSentence, VariantRecord)>,
    pub dropped: Vec<VariantRecord>,
}

/// Anything that turns a source sentence into labeled variants.
pub trait Augmenter: Sync {
    fn strategy(&self) -> &str;

    /// Variants of the sentence at `index` in its corpus. Must be a pure
    /// function of its inputs so corpora can be processed in parallel.
    fn augment(&self, index: usize, sentence: &LabeledSentence) -> Result<SentenceVariants>;
}

/// Applies the within-sentence filters to raw variants in start order.
pub fn filter_variants(
    source: &LabeledSentence,
    raw: Vec<(LabeledSentence, VariantRecord)>,
    dedup: bool,
    forbid_identical: bool,
) -> SentenceVariants {
    let mut out = SentenceVariants::default();
    for (sentence, mut record) in raw {
        record.identical_to_source = sentence.tokens() == source.tokens();
        let duplicate = out
            .kept
            .iter()
            .any(|(s, _)| s.tokens() == sentence.tokens());
        if forbid_identical && record.identical_to_source {
            record.dropped = Some("identical-to-source".into());
            out.dropped.push(record);
        } else if dedup && duplicate {
            record.dropped = Some("duplicate".into());
            out.dropped.push(record);
        } else {
            out.kept.push((sentence, record));
        }
    }
    out
}

/// The masked seq2seq augmenter.
pub struct Seq2SeqAugmenter<'m> {
    pub model: &'m Seq2SeqModel,
    pub config: AugmentationConfig,
    pub model_hash: String,
    pub banned: Vec<TokenId>,
}

impl<'m> Seq2SeqAugmenter<'m> {
    pub fn new(model: &'m Seq2SeqModel, config: AugmentationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Seq2SeqAugmenter {
            model,
            config,
            model_hash: model.hash(),
            banned: (0..Vocab::NUM_SPECIAL).collect(),
        })
    }

    /// Generates the variant starting at `u` without filtering.
    pub fn variant(
        &self,
        index: usize,
        sentence: &LabeledSentence,
        u: usize,
    ) -> Result<(LabeledSentence, VariantRecord)> {
        let masked = mask_fragment(sentence, u, self.config.r)?;
        let ex = self.model.tokenize(&masked);
        let result =
            constrained_beam_search(&self.model.params, &ex, self.config.beam_size, &self.banned)?;
        let mut tokens = sentence.tokens().to_vec();
        for (t, &id) in result.tokens.iter().enumerate() {
            let p = u - 1 + t;
            if sentence.labels()[p] == Label::O {
                tokens[p] = self.model.vocab.token(id).to_string();
            }
        }
        let record = VariantRecord {
            strategy: self.strategy().into(),
            source_index: index,
            u: Some(masked.u),
            v: Some(masked.v),
            r: Some(self.config.r),
            beam_size: Some(self.config.beam_size),
            model_hash: Some(self.model_hash.clone()),
            log_prob: Some(result.log_prob),
            ..Default::default()
        };
        Ok((sentence.with_tokens(tokens)?, record))
    }
}

impl Augmenter for Seq2SeqAugmenter<'_> {
    fn strategy(&self) -> &str {
        "seq2seq"
    }

    fn augment(&self, index: usize, sentence: &LabeledSentence) -> Result<SentenceVariants> {
        let range = start_range(sentence.len(), self.config.r);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index as u64);
        let starts = choose_starts(
            &self.config.start_policy,
            range,
            self.config.variants,
            &mut rng,
        );
        let raw = starts
            .into_iter()
            .map(|u| self.variant(index, sentence, u))
            .collect::<Result<Vec<_>>>()?;
        Ok(filter_variants(
            sentence,
            raw,
            self.config.dedup,
            self.config.forbid_identical,
        ))
    }
}

/// Augments one sentence with the seq2seq model.
pub fn augment_sentence(
    model: &Seq2SeqModel,
    sentence: &LabeledSentence,
    config: &AugmentationConfig,
) -> Result<SentenceVariants> {
    Seq2SeqAugmenter::new(model, config.clone())?.augment(0, sentence)
}

/// `k` generated corpora plus the metadata of every variant.
#[derive(Debug, Clone)]
pub struct GeneratedCorpora {
    pub corpora: Vec<Corpus>,
    pub records: Vec<VariantRecord>,
}

impl GeneratedCorpora {
    /// Writes `<stem>.aug<j>.tsv` for each corpus (1-based `j`) and
    /// `<stem>.aug.jsonl`. Returns the corpus paths.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths = Vec::new();
        for (j, corpus) in self.corpora.iter().enumerate() {
            let path = dir.join(format!("{stem}.aug{}.tsv", j + 1));
            corpus.write(&path)?;
            paths.push(path);
        }
        let meta = dir.join(format!("{stem}.aug.jsonl"));
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
        Ok(paths)
    }
}

/// Runs `augmenter` over every sentence (in parallel) and distributes the
/// variants into `k` corpora: the `j`-th corpus holds each sentence's `j`-th
/// kept variant, or the source sentence when there is none.
pub fn augment_corpus_with(
    augmenter: &dyn Augmenter,
    corpus: &Corpus,
    k: usize,
) -> Result<GeneratedCorpora> {
    if k == 0 {
        return Err(Error::Config(
            "at least one generated corpus is required".into(),
        ));
    }
    let per_sentence: Vec<Result<SentenceVariants>> = corpus
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, s)| augmenter.augment(i, s))
        .collect();
    let mut sets: Vec<Vec<LabeledSentence>> = vec![Vec::with_capacity(corpus.len()); k];
    let mut records = Vec::new();
    for (i, result) in per_sentence.into_iter().enumerate() {
        let SentenceVariants { mut kept, dropped } = result?;
        kept.truncate(k);
        let produced = kept.len();
        for (j, (sentence, mut record)) in kept.into_iter().enumerate() {
            record.set = Some(j);
            sets[j].push(sentence);
            records.push(record);
        }
        for (j, set) in sets.iter_mut().enumerate().skip(produced) {
            set.push(corpus.sentences[i].clone());
            records.push(VariantRecord {
                strategy: augmenter.strategy().into(),
                source_index: i,
                set: Some(j),
                identical_to_source: true,
                fallback: true,
                ..Default::default()
            });
        }
        records.extend(dropped);
    }
    let corpora = sets
        .into_iter()
        .enumerate()
        .map(|(j, s)| Corpus::new(format!("{}.aug{}", corpus.name, j + 1), s))
        .collect();
    Ok(GeneratedCorpora { corpora, records })
}

/// Augments `corpus` with the seq2seq model into `config.variants` corpora.
pub fn augment_corpus(
    model: &Seq2SeqModel,
    corpus: &Corpus,
    config: &AugmentationConfig,
) -> Result<GeneratedCorpora> {
    let augmenter = Seq2SeqAugmenter::new(model, config.clone())?;
    augment_corpus_with(&augmenter, corpus, config.variants)
}

/// Every union of `source` with `multiplier - 1` of the generated corpora,
/// in lexicographic order of the chosen sets.
pub fn assemble_training_sets(
    source: &Corpus,
    generated: &[Corpus],
    multiplier: usize,
) -> Result<Vec<Corpus>> {
    if multiplier == 0 || multiplier - 1 > generated.len() {
        return Err(Error::Config(format!(
            "multiplier {multiplier} needs between 0 and {} generated sets",
            generated.len()
        )));
    }
    Ok((0..generated.len())
        .combinations(multiplier - 1)
        .map(|chosen| {
            let mut name = source.name.clone();
            let mut sentences = source.sentences.clone();
            for &j in &chosen {
                name.push_str(&format!("+{}", generated[j].name));
                sentences.extend(generated[j].sentences.iter().cloned());
            }
            Corpus::new(name, sentences)
        })
        .collect())
}
