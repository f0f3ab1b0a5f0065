//! Metrics and the downstream experiment: exact-span P/R/F1 from a compact
//! tagger, corpus BLEU against the source sentences, fluency perplexity
//! under a small language model, and report tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmenter::{assemble_training_sets, GeneratedCorpora};
use crate::corpus::{
    build_vocab, coerce_bio, spans_from_bio, Corpus, Label, LabeledSentence, Span, Vocab,
};
use crate::error::{Error, Result};
use crate::lm::TokenLm;
use crate::nn::{
    fit, Adam, AdamConfig, Checkpoint, EncoderHead, HeadExample, LmExample, Parameterized,
};
use crate::seq2seq::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(matched: usize, predicted: usize, gold: usize) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, gold);
        let f1 = if precision > 0.0 && recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

/// Exact-span precision, recall and F1 over aligned label sequences.
pub fn span_f1_labels(predicted: &[Vec<Label>], gold: &[Vec<Label>]) -> Result<Prf> {
    if predicted.len() != gold.len() {
        return Err(Error::Misaligned(format!(
            "{} predicted sentences vs {} gold",
            predicted.len(),
            gold.len()
        )));
    }
    let (mut matched, mut n_pred, mut n_gold) = (0, 0, 0);
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Misaligned(format!(
                "sentence {}: {} predicted labels vs {} gold",
                i + 1,
                p.len(),
                g.len()
            )));
        }
        let ps = spans_from_bio(p);
        let gs: BTreeSet<Span> = spans_from_bio(g).into_iter().collect();
        matched += ps.iter().filter(|s| gs.contains(s)).count();
        n_pred += ps.len();
        n_gold += gs.len();
    }
    Ok(Prf::from_counts(matched, n_pred, n_gold))
}

/// [`span_f1_labels`] over two corpora of the same sentences.
pub fn span_f1(predicted: &Corpus, gold: &Corpus) -> Result<Prf> {
    let labels = |c: &Corpus| c.iter().map(|s| s.labels().to_vec()).collect::<Vec<_>>();
    span_f1_labels(&labels(predicted), &labels(gold))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU in `[0, 100]` of each candidate against its own
/// reference: clipped n-gram precisions up to `max_n`, add-one smoothing for
/// n >= 2, and the brevity penalty.
pub fn corpus_bleu(candidates: &Corpus, references: &Corpus, max_n: usize) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Misaligned(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("max_n must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references.iter()) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r.tokens(), n);
            for (gram, count) in ngram_counts(c.tokens(), n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if n == 0 {
            matches[0] as f64 / totals[0] as f64
        } else {
            (matches[n] + 1) as f64 / (totals[n] + 1) as f64
        };
        log_sum += p.ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

pub const FLUENCY_KIND: &str = "fluency-lm";

fn fluency_sequence(vocab: &Vocab, s: &LabeledSentence) -> (Vec<usize>, usize) {
    let mut ids = vec![Vocab::BOS];
    ids.extend(vocab.encode(s.tokens()));
    ids.push(Vocab::EOS);
    (ids, 1)
}

/// Trains the fluency language model on `[BOS] sentence [EOS]` sequences.
pub fn train_fluency_lm(
    corpus: &Corpus,
    config: ModelConfig,
    train: &TrainConfig,
) -> Result<TokenLm> {
    TokenLm::train(FLUENCY_KIND, corpus, config, train, fluency_sequence)
}

/// `exp` of the mean negative log-likelihood per sentence token (the end
/// marker is not scored).
pub fn fluency_ppl(model: &TokenLm, corpus: &Corpus) -> Result<f64> {
    use rayon::prelude::*;
    if corpus.is_empty() {
        return Err(Error::Config("cannot score an empty corpus".into()));
    }
    let lps: Vec<Result<f64>> = corpus
        .sentences
        .par_iter()
        .map(|s| {
            let (mut ids, from) = fluency_sequence(&model.vocab, s);
            ids.pop();
            model.lm.log_prob(&LmExample::next_token(&ids, from))
        })
        .collect();
    let mut total = 0.0;
    for lp in lps {
        total += lp?;
    }
    Ok((-total / corpus.token_count() as f64).exp())
}

/// Words occurring inside aspect spans.
pub fn aspect_vocabulary(corpus: &Corpus) -> BTreeSet<String> {
    corpus
        .iter()
        .flat_map(|s| s.aspect_terms().into_iter().flatten().cloned())
        .collect()
}

/// Fraction of generated variants with at least one O-labeled token inside
/// the regenerated span `[u, v]` that is an aspect word. Fallback slots are
/// not counted.
pub fn aspect_collision_rate(generated: &GeneratedCorpora, aspect_words: &BTreeSet<String>) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for r in &generated.records {
        let (Some(set), Some(u), Some(v)) = (r.set, r.u, r.v) else {
            continue;
        };
        if r.fallback {
            continue;
        }
        let s = &generated.corpora[set].sentences[r.source_index];
        total += 1;
        if (u..=v)
            .any(|p| s.labels()[p - 1] == Label::O && aspect_words.contains(&s.tokens()[p - 1]))
        {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a training token with `[UNK]`, so the tagger
    /// learns to label unseen words from context.
    pub unk_rate: f64,
    pub seed: u64,
}

impl TaggerConfig {
    pub fn desk(seed: u64) -> Self {
        TaggerConfig {
            model: ModelConfig {
                n_enc_layers: 2,
                n_dec_layers: 0,
                n_heads: 2,
                d_model: 32,
                d_ff: 64,
                vocab_size: 0,
                n_labels: 3,
                max_positions: 64,
                dropout_rate: 0.1,
                param_seed: seed,
                label_embeddings: false,
            },
            epochs: 20,
            batch_size: 8,
            learning_rate: 2e-3,
            unk_rate: 0.1,
            seed,
        }
    }
}

pub const TAGGER_KIND: &str = "tagger";

/// Encoder-only BIO tagger.
#[derive(Debug, Clone)]
pub struct Tagger {
    pub head: EncoderHead,
    pub vocab: Vocab,
    /// Epoch whose weights were kept and its dev F1.
    pub best_epoch: usize,
    pub dev_f1: f64,
}

impl Tagger {
    /// Labels for `tokens`: per-token argmax, then orphan `I` becomes `B`.
    pub fn predict(&self, tokens: &[String]) -> Result<Vec<Label>> {
        let logits = self.head.logits(&self.vocab.encode(tokens), &[])?;
        let mut labels: Vec<Label> = logits
            .rows()
            .into_iter()
            .map(|row| {
                let best = (0..3)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                    .expect("three classes");
                Label::from_index(best).expect("valid class")
            })
            .collect();
        coerce_bio(&mut labels);
        Ok(labels)
    }

    /// A copy of `corpus` with predicted labels.
    pub fn tag(&self, corpus: &Corpus) -> Result<Corpus> {
        use rayon::prelude::*;
        let sentences: Vec<Result<LabeledSentence>> = corpus
            .sentences
            .par_iter()
            .map(|s| LabeledSentence::new(s.tokens().to_vec(), self.predict(s.tokens())?))
            .collect();
        Ok(Corpus::new(
            corpus.name.clone(),
            sentences.into_iter().collect::<Result<_>>()?,
        ))
    }

    pub fn evaluate(&self, gold: &Corpus) -> Result<Prf> {
        span_f1(&self.tag(gold)?, gold)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.head.config(),
            "vocab": self.vocab,
            "best_epoch": self.best_epoch,
            "dev_f1": self.dev_f1,
        });
        self.head.to_checkpoint(TAGGER_KIND, meta)
    }
}

/// Trains the tagger for `config.epochs` passes over shuffled `train` and
/// keeps the epoch with the best dev F1 (earliest on ties).
pub fn train_tagger(train: &Corpus, dev: &Corpus, config: &TaggerConfig) -> Result<Tagger> {
    if train.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("dev corpus is empty".into()));
    }
    let vocab = build_vocab(train, 1);
    let model_config = ModelConfig {
        vocab_size: vocab.len(),
        max_positions: config
            .model
            .max_positions
            .max(train.max_len())
            .max(dev.max_len()),
        ..config.model
    };
    let mut tagger = Tagger {
        head: EncoderHead::new(model_config, 3, false)?,
        vocab,
        best_epoch: 0,
        dev_f1: f64::NEG_INFINITY,
    };
    let encoded: Vec<(Vec<usize>, Vec<Option<usize>>)> = train
        .iter()
        .map(|s| {
            (
                tagger.vocab.encode(s.tokens()),
                s.labels().iter().map(|l| Some(l.index())).collect(),
            )
        })
        .collect();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let mut best = tagger.head.clone();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..Default::default()
        },
        tagger.head.store(),
    );
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut rng);
        let batches: Vec<Vec<HeadExample>> = order
            .chunks(config.batch_size)
            .map(|chunk| {
                chunk
                    .iter()
                    .map(|&i| {
                        let (tokens, targets) = &encoded[i];
                        HeadExample {
                            tokens: tokens
                                .iter()
                                .map(|&t| {
                                    if rng.gen::<f64>() < config.unk_rate {
                                        Vocab::UNK
                                    } else {
                                        t
                                    }
                                })
                                .collect(),
                            labels: Vec::new(),
                            targets: targets.clone(),
                        }
                    })
                    .collect()
            })
            .collect();
        let seed_base = config
            .seed
            .wrapping_mul(1_000_003)
            .wrapping_add(epoch as u64);
        fit(&mut tagger.head, &mut adam, steps_per_epoch, |head, i| {
            head.loss_and_gradients(&batches[i - 1], seed_base.wrapping_add(i as u64 * 7919))
        })?;
        let f1 = tagger.evaluate(dev)?.f1;
        if f1 > tagger.dev_f1 {
            tagger.dev_f1 = f1;
            tagger.best_epoch = epoch;
            best = tagger.head.clone();
        }
    }
    tagger.head = best;
    Ok(tagger)
}

/// One (strategy, multiplier, seed) cell; P/R/F1 average over the training
/// sets of that multiplier, BLEU and fluency describe the added data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub strategy: String,
    pub multiplier: usize,
    pub seed: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub bleu: f64,
    pub fluency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub test: String,
    pub rows: Vec<ExperimentRow>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,multiplier,seed,precision,recall,f1,bleu,fluency\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.4},{:.4}",
                r.strategy, r.multiplier, r.seed, r.precision, r.recall, r.f1, r.bleu, r.fluency
            )
            .unwrap();
        }
        out
    }

    /// Rows grouped by (strategy, multiplier), in first-appearance order.
    pub fn groups(&self) -> Vec<((String, usize), Vec<&ExperimentRow>)> {
        let mut order = Vec::new();
        let mut groups: BTreeMap<(String, usize), Vec<&ExperimentRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = (r.strategy.clone(), r.multiplier);
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .into_iter()
            .map(|k| {
                let rows = groups.remove(&k).expect("key present");
                (k, rows)
            })
            .collect()
    }

    /// Mean F1 of a (strategy, multiplier) cell over seeds.
    pub fn mean_f1(&self, strategy: &str, multiplier: usize) -> Option<f64> {
        let f1s: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.strategy == strategy && r.multiplier == multiplier)
            .map(|r| r.f1)
            .collect();
        (!f1s.is_empty()).then(|| mean_std(&f1s).0)
    }

    /// Human-readable table of means (and F1 spread) over seeds.
    pub fn summary(&self) -> String {
        let mut out = format!("source: {}  test: {}\n", self.source, self.test);
        writeln!(
            out,
            "{:<12} {:>4} {:>5} {:>9} {:>9} {:>15} {:>8} {:>9}",
            "strategy", "x", "seeds", "P", "R", "F1 (sd)", "BLEU", "fluency"
        )
        .unwrap();
        for ((strategy, mult), rows) in self.groups() {
            let col = |f: fn(&ExperimentRow) -> f64| {
                mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (p, _) = col(|r| r.precision);
            let (rc, _) = col(|r| r.recall);
            let (f1, sd) = col(|r| r.f1);
            let (bleu, _) = col(|r| r.bleu);
            let (flu, _) = col(|r| r.fluency);
            writeln!(
                out,
                "{:<12} {:>4} {:>5} {:>9.2} {:>9.2} {:>8.2} ({:>4.2}) {:>8.2} {:>9.2}",
                strategy,
                mult,
                rows.len(),
                100.0 * p,
                100.0 * rc,
                100.0 * f1,
                100.0 * sd,
                bleu,
                flu
            )
            .unwrap();
        }
        out
    }
}

/// Generated corpora of one augmentation strategy.
#[derive(Debug, Clone)]
pub struct StrategyData {
    pub name: String,
    pub generated: Vec<Corpus>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub multipliers: Vec<usize>,
    pub seeds: Vec<u64>,
    pub tagger: TaggerConfig,
}

/// For every strategy and multiplier, trains one tagger per seed on each
/// assembled training set and records the mean span scores on `test`.
pub fn run_experiment(
    source: &Corpus,
    dev: &Corpus,
    test: &Corpus,
    strategies: &[StrategyData],
    config: &ExperimentConfig,
    fluency: Option<&TokenLm>,
) -> Result<EvalReport> {
    if strategies.is_empty() {
        return Err(Error::Config("no augmentation strategies given".into()));
    }
    if config.seeds.is_empty() || config.multipliers.is_empty() {
        return Err(Error::Config(
            "seeds and multipliers must be non-empty".into(),
        ));
    }
    let mut report = EvalReport {
        source: source.name.clone(),
        test: test.name.clone(),
        rows: Vec::new(),
    };
    let fluency_of = |c: &Corpus| fluency.map_or(Ok(f64::NAN), |lm| fluency_ppl(lm, c));
    let mut baseline: BTreeMap<u64, Prf> = BTreeMap::new();
    for strategy in strategies {
        for &multiplier in &config.multipliers {
            let sets = assemble_training_sets(source, &strategy.generated, multiplier)?;
            let added: Vec<&Corpus> = if multiplier == 1 {
                vec![source]
            } else {
                strategy.generated.iter().collect()
            };
            let bleu = mean_std(
                &added
                    .iter()
                    .map(|c| corpus_bleu(c, source, 4))
                    .collect::<Result<Vec<_>>>()?,
            )
            .0;
            let flu = mean_std(
                &added
                    .iter()
                    .map(|c| fluency_of(c))
                    .collect::<Result<Vec<_>>>()?,
            )
            .0;
            for &seed in &config.seeds {
                let tagger_config = TaggerConfig {
                    seed,
                    model: ModelConfig {
                        param_seed: seed,
                        ..config.tagger.model
                    },
                    ..config.tagger.clone()
                };
                let prf = if multiplier == 1 {
                    match baseline.get(&seed) {
                        Some(p) => *p,
                        None => {
                            let p = train_tagger(source, dev, &tagger_config)?.evaluate(test)?;
                            baseline.insert(seed, p);
                            p
                        }
                    }
                } else {
                    let scores = sets
                        .iter()
                        .map(|set| train_tagger(set, dev, &tagger_config)?.evaluate(test))
                        .collect::<Result<Vec<_>>>()?;
                    let avg =
                        |f: fn(&Prf) -> f64| mean_std(&scores.iter().map(f).collect::<Vec<_>>()).0;
                    Prf {
                        precision: avg(|p| p.precision),
                        recall: avg(|p| p.recall),
                        f1: avg(|p| p.f1),
                    }
                };
                report.rows.push(ExperimentRow {
                    strategy: strategy.name.clone(),
                    multiplier,
                    seed,
                    precision: prf.precision,
                    recall: prf.recall,
                    f1: prf.f1,
                    bleu,
                    fluency: flu,
                });
            }
        }
    }
    Ok(report)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Grammar;
    use proptest::prelude::*;

    fn labels(s: &str) -> Vec<Label> {
        s.split_whitespace().map(|t| t.parse().unwrap()).collect()
    }

    #[test]
    fn worked_example() {
        let p = span_f1_labels(&[labels("O B I O O")], &[labels("O B I O B")]).unwrap();
        assert_eq!(p.precision, 1.0);
        assert_eq!(p.recall, 0.5);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
        let same = span_f1_labels(&[labels("B I O B")], &[labels("B I O B")]).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let none = span_f1_labels(&[labels("O O")], &[labels("O O")]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        assert!(span_f1_labels(&[labels("O")], &[]).is_err());
        assert!(span_f1_labels(&[labels("O")], &[labels("O O")]).is_err());
    }

    fn brute_force(pred: &[Vec<Label>], gold: &[Vec<Label>]) -> (usize, usize, usize) {
        // Enumerate every (start, end) pair and test membership directly.
        let is_span = |l: &[Label], a: usize, b: usize| {
            l[a] == Label::B
                && (a + 1..=b).all(|k| l[k] == Label::I)
                && (b + 1 == l.len() || l[b + 1] != Label::I)
        };
        let (mut m, mut p, mut g) = (0, 0, 0);
        for (pl, gl) in pred.iter().zip(gold) {
            for a in 0..pl.len() {
                for b in a..pl.len() {
                    let (x, y) = (is_span(pl, a, b), is_span(gl, a, b));
                    p += x as usize;
                    g += y as usize;
                    m += (x && y) as usize;
                }
            }
        }
        (m, p, g)
    }

    fn strict_bio() -> impl Strategy<Value = Vec<Label>> {
        prop::collection::vec(0usize..3, 1..12).prop_map(|v| {
            let mut l: Vec<Label> = v
                .into_iter()
                .map(|i| Label::from_index(i).unwrap())
                .collect();
            coerce_bio(&mut l);
            l
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn matches_brute_force(pairs in prop::collection::vec(
            strict_bio().prop_flat_map(|g| {
                let n = g.len();
                (Just(g), prop::collection::vec(0usize..3, n).prop_map(|v| {
                    let mut l: Vec<Label> = v.into_iter().map(|i| Label::from_index(i).unwrap()).collect();
                    coerce_bio(&mut l);
                    l
                }))
            }), 1..4)) {
            let gold: Vec<Vec<Label>> = pairs.iter().map(|p| p.0.clone()).collect();
            let pred: Vec<Vec<Label>> = pairs.iter().map(|p| p.1.clone()).collect();
            let (m, p, g) = brute_force(&pred, &gold);
            let got = span_f1_labels(&pred, &gold).unwrap();
            prop_assert_eq!(got, Prf::from_counts(m, p, g));
            prop_assert!(got.f1 <= got.precision.max(got.recall) + 1e-15);
            let swapped = span_f1_labels(&gold, &pred).unwrap();
            prop_assert_eq!(swapped.precision, got.recall);
            prop_assert_eq!(swapped.recall, got.precision);
        }
    }

    fn corpus_of(texts: &[&str]) -> Corpus {
        Corpus::new(
            "c",
            texts
                .iter()
                .map(|t| {
                    let n = t.split_whitespace().count();
                    LabeledSentence::new(
                        t.split_whitespace().map(String::from).collect(),
                        vec![Label::O; n],
                    )
                    .unwrap()
                })
                .collect(),
        )
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let g = Grammar::parse(include_str!("../../../data/templates/reviews.tpl")).unwrap();
        let c = g.generate(3, 50);
        assert_eq!(corpus_bleu(&c, &c, 4).unwrap(), 100.0);
        let a = corpus_of(&["a b c d e"]);
        let b = corpus_of(&["v w x y z"]);
        assert!(corpus_bleu(&a, &b, 4).unwrap() < 1.0);
        assert!(corpus_bleu(&a, &corpus_of(&[]), 4).is_err());
    }

    #[test]
    fn bleu_falls_as_overlap_shrinks() {
        let reference = corpus_of(&["a b c d e f g h"]);
        let candidates = [
            "a b c d e f g h",
            "a b c d e f g x",
            "a b c d e f x x",
            "a b c d x y x y",
            "a b x y z x y z",
            "a x y z w x y z",
        ];
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| corpus_bleu(&corpus_of(&[c]), &reference, 4).unwrap())
            .collect();
        assert!(scores.windows(2).all(|w| w[0] > w[1]), "{scores:?}");
    }

    #[test]
    fn bleu_hand_computed() {
        // candidate "a b c x", reference "a b c d": p1 = 3/4,
        // p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1), no brevity penalty.
        let got = corpus_bleu(&corpus_of(&["a b c x"]), &corpus_of(&["a b c d"]), 4).unwrap();
        let expect = 100.0 * (0.75f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((got - expect).abs() < 1e-12);
        // Short candidate: brevity penalty exp(1 - 4/2).
        let short = corpus_bleu(&corpus_of(&["a b"]), &corpus_of(&["a b c d"]), 2).unwrap();
        assert!((short - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn fluency_prefers_in_distribution_text() {
        let g = Grammar::parse(include_str!("../../../data/templates/reviews.tpl")).unwrap();
        let train = g.generate(1, 150);
        let config = ModelConfig {
            n_enc_layers: 0,
            n_dec_layers: 1,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            vocab_size: 0,
            n_labels: 3,
            max_positions: 40,
            dropout_rate: 0.0,
            param_seed: 1,
            label_embeddings: true,
        };
        let tc = TrainConfig {
            iterations: 300,
            batch_size: 16,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let lm = train_fluency_lm(&train, config, &tc).unwrap();
        let held = g.generate(2, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shuffled = Corpus::new(
            "shuffled",
            held.iter()
                .map(|s| {
                    let mut t = s.tokens().to_vec();
                    t.shuffle(&mut rng);
                    s.with_tokens(t).unwrap()
                })
                .collect(),
        );
        let a = fluency_ppl(&lm, &held).unwrap();
        let b = fluency_ppl(&lm, &shuffled).unwrap();
        assert!(a < b, "{a} vs {b}");
        assert_eq!(a, fluency_ppl(&lm, &held).unwrap());

        let single = corpus_of(&["screen"]);
        let id = lm.vocab.id("screen");
        let logits = lm.lm.logits(&[Vocab::BOS]).unwrap();
        let p = crate::nn::softmax_rows(&logits)[[0, id]];
        assert!((fluency_ppl(&lm, &single).unwrap() - 1.0 / p).abs() < 1e-9);
    }

    #[test]
    fn tagger_learns_closed_aspect_set() {
        let g = Grammar::parse(include_str!("../../../data/templates/reviews.tpl")).unwrap();
        let train = g.generate(1, 120);
        let dev = g.generate(2, 40);
        let config = TaggerConfig {
            epochs: 8,
            ..TaggerConfig::desk(0)
        };
        let tagger = train_tagger(&train, &dev, &config).unwrap();
        assert!(tagger.dev_f1 > 0.9, "{}", tagger.dev_f1);
        assert!(train_tagger(&train, &Corpus::new("e", vec![]), &config).is_err());
        let again = train_tagger(&train, &dev, &config).unwrap();
        assert_eq!(again.dev_f1, tagger.dev_f1);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 5.0, 9.0]) - 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0], &[4.0, 4.0]), 0.0);
    }

    #[test]
    fn report_csv_and_summary() {
        let report = EvalReport {
            source: "s".into(),
            test: "t".into(),
            rows: vec![
                ExperimentRow {
                    strategy: "seq2seq".into(),
                    multiplier: 2,
                    seed: 0,
                    precision: 0.5,
                    recall: 0.5,
                    f1: 0.5,
                    bleu: 40.0,
                    fluency: 10.0,
                },
                ExperimentRow {
                    strategy: "seq2seq".into(),
                    multiplier: 2,
                    seed: 1,
                    precision: 0.7,
                    recall: 0.7,
                    f1: 0.7,
                    bleu: 40.0,
                    fluency: 10.0,
                },
            ],
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("strategy,multiplier,seed,precision,recall,f1,bleu,fluency\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!((report.mean_f1("seq2seq", 2).unwrap() - 0.6).abs() < 1e-12);
        assert!(report.summary().contains("seq2seq"));
    }
}
