//! Fragment masking and the training-time example sampler.
//!
//! A training example is built by drawing a sentence with probability
//! proportional to `sqrt(len)` (sentences of length <= 5 are never drawn),
//! picking a start position uniformly among the placements where the
//! fragment fits, and hiding the O-labeled tokens of the fragment.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Label, LabeledSentence};
use crate::error::{Error, Result};

/// Surface form written in place of hidden tokens.
pub const MASK_TOKEN: &str = "[MASK]";

/// A sentence with one contiguous fragment hidden at its O positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub masked_tokens: Vec<String>,
    pub labels: Vec<Label>,
    pub fragment: Vec<String>,
    /// 1-based inclusive start of the fragment.
    pub u: usize,
    /// 1-based inclusive end of the fragment.
    pub v: usize,
}

impl MaskedExample {
    pub fn len(&self) -> usize {
        self.masked_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_tokens.is_empty()
    }

    pub fn fragment_len(&self) -> usize {
        self.v - self.u + 1
    }

    /// Label of 1-based position `pos`, with position 0 reading as `O`.
    pub fn label_at(&self, pos: usize) -> Label {
        if pos == 0 {
            Label::O
        } else {
            self.labels[pos - 1]
        }
    }

    /// The original sentence, recovered from the masked tokens and fragment.
    pub fn original_tokens(&self) -> Vec<String> {
        let mut tokens = self.masked_tokens.clone();
        tokens[self.u - 1..self.v].clone_from_slice(&self.fragment);
        tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Sentences of this length or shorter are never sampled.
    pub min_length_exclusive: usize,
    pub mask_proportion: f64,
    pub batch_size: usize,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_length_exclusive: 5,
            mask_proportion: 0.5,
            batch_size: 16,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        validate_proportion(self.mask_proportion)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn validate_proportion(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "mask proportion must be in (0, 1], got {r}"
        )))
    }
}

/// Unnormalized sampling weight: `sqrt(length)` for length > 5, else 0.
pub fn sample_weight(length: usize) -> f64 {
    sample_weight_with(length, 5)
}

pub fn sample_weight_with(length: usize, min_length_exclusive: usize) -> f64 {
    if length > min_length_exclusive {
        (length as f64).sqrt()
    } else {
        0.0
    }
}

/// Rounds a non-negative `x` to the nearest integer, halves upward.
pub fn round_half_up(x: f64) -> usize {
    // The epsilon absorbs representation error in products such as 0.35 * 10.
    (x + 0.5 + 1e-9).floor() as usize
}

/// Number of masked positions: `max(1, round_half_up(r * length))`.
pub fn fragment_length(length: usize, r: f64) -> usize {
    round_half_up(r * length as f64).clamp(1, length.max(1))
}

/// Draws sentences with replacement, weighted by [`sample_weight`].
#[derive(Debug, Clone)]
pub struct ExampleSampler<'c> {
    corpus: &'c Corpus,
    dist: WeightedIndex<f64>,
}

impl<'c> ExampleSampler<'c> {
    pub fn new(corpus: &'c Corpus, min_length_exclusive: usize) -> Result<Self> {
        let weights: Vec<f64> = corpus
            .iter()
            .map(|s| sample_weight_with(s.len(), min_length_exclusive))
            .collect();
        let dist = WeightedIndex::new(&weights).map_err(|_| Error::NothingToSample {
            min_length: min_length_exclusive,
        })?;
        Ok(ExampleSampler { corpus, dist })
    }

    pub fn sample_index(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> &'c LabeledSentence {
        &self.corpus.sentences[self.sample_index(rng)]
    }
}

/// One weighted draw from `corpus`.
pub fn sample_example<'c>(corpus: &'c Corpus, rng: &mut impl Rng) -> Result<&'c LabeledSentence> {
    Ok(ExampleSampler::new(corpus, 5)?.sample(rng))
}

/// Number of valid 1-based start positions for a fragment of `r * length`.
pub fn start_range(length: usize, r: f64) -> usize {
    length + 1 - fragment_length(length, r)
}

/// Uniform start position in `[1, length - m + 1]`.
pub fn sample_start(length: usize, r: f64, rng: &mut impl Rng) -> Result<usize> {
    let m = fragment_length(length, r);
    if length == 0 || m > length {
        return Err(Error::SpanOutOfBounds {
            start: 1,
            len: m,
            sentence_len: length,
        });
    }
    Ok(rng.gen_range(1..=length - m + 1))
}

/// Masks positions `u..u+m-1` of `sentence`, replacing only O-labeled tokens.
pub fn mask_fragment(sentence: &LabeledSentence, u: usize, r: f64) -> Result<MaskedExample> {
    let n = sentence.len();
    let m = fragment_length(n, r);
    mask_span(sentence, u, m)
}

/// Like [`mask_fragment`] with an explicit fragment length.
pub fn mask_span(sentence: &LabeledSentence, u: usize, m: usize) -> Result<MaskedExample> {
    let n = sentence.len();
    if u == 0 || m == 0 || u + m - 1 > n {
        return Err(Error::SpanOutOfBounds {
            start: u,
            len: m,
            sentence_len: n,
        });
    }
    let v = u + m - 1;
    let masked_tokens = sentence
        .tokens()
        .iter()
        .zip(sentence.labels())
        .enumerate()
        .map(|(i, (token, label))| {
            let pos = i + 1;
            if pos >= u && pos <= v && *label == Label::O {
                MASK_TOKEN.to_string()
            } else {
                token.clone()
            }
        })
        .collect();
    Ok(MaskedExample {
        masked_tokens,
        labels: sentence.labels().to_vec(),
        fragment: sentence.tokens()[u - 1..v].to_vec(),
        u,
        v,
    })
}

/// Assembles one training batch of `config.batch_size` masked examples.
pub fn build_batch(
    corpus: &Corpus,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<MaskedExample>> {
    config.validate()?;
    let sampler = ExampleSampler::new(corpus, config.min_length_exclusive)?;
    build_batch_with(&sampler, config, rng)
}

pub fn build_batch_with(
    sampler: &ExampleSampler<'_>,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<MaskedExample>> {
    (0..config.batch_size)
        .map(|_| {
            let sentence = sampler.sample(rng);
            let u = sample_start(sentence.len(), config.mask_proportion, rng)?;
            mask_fragment(sentence, u, config.mask_proportion)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::coerce_bio;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn figure_sentence() -> LabeledSentence {
        LabeledSentence::parse_pair(
            "The screen is very large and crystal clear with amazing colors and resolution",
            "OBOOOOOOOOBOB",
        )
        .unwrap()
    }

    fn o_sentence(n: usize) -> LabeledSentence {
        let text: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        LabeledSentence::parse_pair(&text.join(" "), &"O".repeat(n)).unwrap()
    }

    #[test]
    fn weights() {
        assert_eq!(sample_weight(9), 3.0);
        assert_eq!(sample_weight(5), 0.0);
        assert_eq!(sample_weight(36), 6.0);
        assert_eq!(sample_weight(1), 0.0);
    }

    #[test]
    fn fragment_lengths() {
        assert_eq!(fragment_length(13, 0.5), 7);
        assert_eq!(fragment_length(1, 0.5), 1);
        assert_eq!(fragment_length(10, 0.7), 7);
        assert_eq!(fragment_length(10, 0.3), 3);
        assert_eq!(fragment_length(10, 0.35), 4);
        assert_eq!(fragment_length(4, 1.0), 4);
        assert_eq!(fragment_length(3, 0.01), 1);
    }

    #[test]
    fn start_ranges() {
        assert_eq!(start_range(13, 0.5), 7);
        assert_eq!(start_range(10, 0.3), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample_start(4, 1.0, &mut rng).unwrap(), 1);
            let u = sample_start(10, 0.3, &mut rng).unwrap();
            assert!((1..=8).contains(&u));
        }
    }

    #[test]
    fn start_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 70_000;
        let mut counts = [0usize; 8];
        for _ in 0..draws {
            counts[sample_start(13, 0.5, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        for &c in &counts[1..8] {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / 7.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn masks_figure_sentence_middle() {
        let ex = mask_fragment(&figure_sentence(), 3, 0.5).unwrap();
        assert_eq!((ex.u, ex.v), (3, 9));
        for p in 3..=9 {
            assert_eq!(ex.masked_tokens[p - 1], MASK_TOKEN);
        }
        assert_eq!(ex.masked_tokens[1], "screen");
        assert_eq!(ex.masked_tokens[9], "amazing");
        assert_eq!(
            ex.fragment,
            ["is", "very", "large", "and", "crystal", "clear", "with"]
        );
        assert_eq!(ex.original_tokens(), figure_sentence().tokens());
    }

    #[test]
    fn aspect_token_stays_visible_and_in_fragment() {
        let ex = mask_fragment(&figure_sentence(), 1, 0.3).unwrap();
        assert_eq!(ex.fragment_len(), 4);
        assert_eq!(
            &ex.masked_tokens[..4],
            [MASK_TOKEN, "screen", MASK_TOKEN, MASK_TOKEN]
        );
        assert_eq!(ex.fragment, ["The", "screen", "is", "very"]);
    }

    #[test]
    fn full_mask_of_outside_sentence() {
        let s = o_sentence(6);
        let ex = mask_fragment(&s, 1, 1.0).unwrap();
        assert!(ex.masked_tokens.iter().all(|t| t == MASK_TOKEN));
        assert_eq!(ex.fragment, s.tokens());
    }

    #[test]
    fn span_out_of_bounds() {
        let s = o_sentence(10);
        assert!(matches!(
            mask_fragment(&s, 9, 0.3),
            Err(Error::SpanOutOfBounds { .. })
        ));
        assert!(mask_fragment(&s, 0, 0.3).is_err());
        assert!(mask_fragment(&s, 8, 0.3).is_ok());
    }

    #[test]
    fn unsampleable_corpus() {
        let c = Corpus::new("c", vec![o_sentence(4), o_sentence(5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_example(&c, &mut rng),
            Err(Error::NothingToSample { .. })
        ));
    }

    #[test]
    fn single_sampleable_sentence_always_drawn() {
        let c = Corpus::new("c", vec![o_sentence(3), o_sentence(8), o_sentence(5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            assert_eq!(sample_example(&c, &mut rng).unwrap().len(), 8);
        }
    }

    #[test]
    fn weighted_ratio_matches_sqrt_lengths() {
        let c = Corpus::new("c", vec![o_sentence(9), o_sentence(36)]);
        let sampler = ExampleSampler::new(&c, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 2];
        for _ in 0..100_000 {
            counts[sampler.sample_index(&mut rng)] += 1;
        }
        let ratio = counts[1] as f64 / counts[0] as f64;
        assert!((ratio - 2.0).abs() / 2.0 < 0.02, "{counts:?}");
    }

    #[test]
    fn batches_have_requested_size_and_are_deterministic() {
        let c = Corpus::new("c", (6..16).map(o_sentence).collect());
        let config = SamplerConfig {
            batch_size: 4,
            ..Default::default()
        };
        let a = build_batch(&c, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_batch(&c, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
        let bad = SamplerConfig {
            batch_size: 0,
            ..config
        };
        assert!(build_batch(&c, &bad, &mut ChaCha8Rng::seed_from_u64(9)).is_err());
    }

    fn check_invariants(s: &LabeledSentence, ex: &MaskedExample) {
        assert_eq!(ex.masked_tokens.len(), s.len());
        assert_eq!(ex.labels, s.labels());
        assert_eq!(ex.fragment.len(), ex.v - ex.u + 1);
        assert_eq!(ex.fragment.as_slice(), &s.tokens()[ex.u - 1..ex.v]);
        for p in 1..=s.len() {
            let inside = p >= ex.u && p <= ex.v;
            let masked = ex.masked_tokens[p - 1] == MASK_TOKEN;
            assert_eq!(masked, inside && s.labels()[p - 1] == Label::O);
            if !masked {
                assert_eq!(ex.masked_tokens[p - 1], s.tokens()[p - 1]);
            }
        }
    }

    #[test]
    fn many_batches_satisfy_invariants() {
        let grammar =
            crate::corpus::Grammar::parse(include_str!("../../../data/templates/reviews.tpl"))
                .unwrap();
        let corpus = grammar.generate(4, 200);
        let config = SamplerConfig {
            batch_size: 8,
            ..Default::default()
        };
        let sampler = ExampleSampler::new(&corpus, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            for ex in build_batch_with(&sampler, &config, &mut rng).unwrap() {
                let original =
                    LabeledSentence::new(ex.original_tokens(), ex.labels.clone()).unwrap();
                check_invariants(&original, &ex);
                assert!(corpus.sentences.contains(&original));
            }
        }
    }

    proptest! {
        #[test]
        fn fragment_length_monotone_in_r(n in 1usize..60, a in 0.001f64..1.0, b in 0.001f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fragment_length(n, lo) <= fragment_length(n, hi));
            prop_assert!(fragment_length(n, hi) <= n);
        }

        #[test]
        fn masking_hits_exactly_outside_positions(
            raw in prop::collection::vec(0..3usize, 1..25),
            r in 0.01f64..=1.0,
            seed in any::<u64>(),
        ) {
            let mut labels: Vec<Label> = raw.into_iter().map(|i| Label::ALL[i]).collect();
            coerce_bio(&mut labels);
            let tokens = (0..labels.len()).map(|i| format!("t{i}")).collect();
            let s = LabeledSentence::new(tokens, labels).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = sample_start(s.len(), r, &mut rng).unwrap();
            let ex = mask_fragment(&s, u, r).unwrap();
            check_invariants(&s, &ex);
        }
    }
}
