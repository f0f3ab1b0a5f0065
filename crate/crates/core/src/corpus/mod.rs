//! BIO corpora: the labeled-sentence data model, CoNLL-style I/O, vocabulary
//! construction and a template-driven synthetic corpus generator.

mod synthetic;
mod vocab;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_corpus, Grammar};
pub use vocab::{build_vocab, TokenId, Vocab};

/// Position of a word relative to an aspect term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    B,
    I,
    O,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::B, Label::I, Label::O];

    /// Dense index used by embedding tables and classifier heads.
    pub fn index(self) -> usize {
        match self {
            Label::B => 0,
            Label::I => 1,
            Label::O => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            Label::B => 'B',
            Label::I => 'I',
            Label::O => 'O',
        }
    }

    pub fn is_aspect(self) -> bool {
        self != Label::O
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "B" => Ok(Label::B),
            "I" => Ok(Label::I),
            "O" => Ok(Label::O),
            other => Err(Error::InvalidSentence(format!(
                "unknown label tag `{other}`"
            ))),
        }
    }
}

/// Checks that every `I` directly follows a `B` or an `I`.
///
/// Returns the 0-based index of the first offending tag.
pub fn first_bio_violation(labels: &[Label]) -> Option<usize> {
    let mut prev = Label::O;
    for (i, &label) in labels.iter().enumerate() {
        if label == Label::I && prev == Label::O {
            return Some(i);
        }
        prev = label;
    }
    None
}

/// Rewrites orphan `I` tags to `B`.
pub fn coerce_bio(labels: &mut [Label]) {
    let mut prev = Label::O;
    for label in labels.iter_mut() {
        if *label == Label::I && prev == Label::O {
            *label = Label::B;
        }
        prev = *label;
    }
}

fn validate_token(token: &str) -> Result<()> {
    if token.is_empty() {
        return Err(Error::InvalidSentence("empty token".into()));
    }
    if token.chars().any(char::is_whitespace) {
        return Err(Error::InvalidSentence(format!(
            "token `{}` contains whitespace",
            token.escape_debug()
        )));
    }
    Ok(())
}

/// A tokenized sentence with one BIO label per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledSentence {
    tokens: Vec<String>,
    labels: Vec<Label>,
}

impl LabeledSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<Label>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidSentence("sentence is empty".into()));
        }
        if tokens.len() != labels.len() {
            return Err(Error::InvalidSentence(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        for token in &tokens {
            validate_token(token)?;
        }
        if let Some(at) = first_bio_violation(&labels) {
            return Err(Error::InvalidSentence(format!(
                "I tag at position {} does not follow B or I",
                at + 1
            )));
        }
        Ok(LabeledSentence { tokens, labels })
    }

    /// Convenience constructor from whitespace-separated tokens and a label
    /// string such as `"OBOO"`.
    pub fn parse_pair(tokens: &str, labels: &str) -> Result<Self> {
        let tokens = tokens.split_whitespace().map(str::to_string).collect();
        let labels = labels
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| c.to_string().parse())
            .collect::<Result<Vec<_>>>()?;
        LabeledSentence::new(tokens, labels)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spans(&self) -> Vec<Span> {
        spans_from_bio(&self.labels)
    }

    /// Tokens of each aspect span, in order.
    pub fn aspect_terms(&self) -> Vec<&[String]> {
        self.spans()
            .into_iter()
            .map(|s| &self.tokens[s.start - 1..s.end])
            .collect()
    }

    /// Same labels, new tokens. Used by augmenters that rewrite words in place.
    pub fn with_tokens(&self, tokens: Vec<String>) -> Result<Self> {
        LabeledSentence::new(tokens, self.labels.clone())
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// An aspect span, 1-based and inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(1 <= start && start <= end);
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maximal `B I*` runs of a well-formed label sequence.
pub fn spans_from_bio(labels: &[Label]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &label) in labels.iter().enumerate() {
        let pos = i + 1;
        match label {
            Label::B => {
                if let Some(start) = open.take() {
                    spans.push(Span::new(start, pos - 1));
                }
                open = Some(pos);
            }
            Label::I => {
                // Orphan I only reaches here when the precondition is broken;
                // treat it as opening a span.
                if open.is_none() {
                    open = Some(pos);
                }
            }
            Label::O => {
                if let Some(start) = open.take() {
                    spans.push(Span::new(start, pos - 1));
                }
            }
        }
    }
    if let Some(start) = open {
        spans.push(Span::new(start, labels.len()));
    }
    spans
}

/// An ordered collection of labeled sentences.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub sentences: Vec<LabeledSentence>,
}

/// How [`parse_conll_with`] treats `I` tags that do not continue a span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BioMode {
    #[default]
    Strict,
    /// Rewrite orphan `I` to `B`.
    Permissive,
}

impl Corpus {
    pub fn new(name: impl Into<String>, sentences: Vec<LabeledSentence>) -> Self {
        Corpus {
            name: name.into(),
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, LabeledSentence> {
        self.sentences.iter()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(LabeledSentence::len).sum()
    }

    pub fn max_len(&self) -> usize {
        self.sentences
            .iter()
            .map(LabeledSentence::len)
            .max()
            .unwrap_or(0)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Corpus> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut corpus = parse_conll(&text)?;
        corpus.name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(corpus)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serialize_conll(self)).map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a LabeledSentence;
    type IntoIter = std::slice::Iter<'a, LabeledSentence>;

    fn into_iter(self) -> Self::IntoIter {
        self.sentences.iter()
    }
}

/// Parses `token<TAB>label` lines with blank lines between sentences.
pub fn parse_conll(text: &str) -> Result<Corpus> {
    parse_conll_with(text, BioMode::Strict)
}

pub fn parse_conll_with(text: &str, mode: BioMode) -> Result<Corpus> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut first_line = 0;

    let mut flush = |tokens: &mut Vec<String>, labels: &mut Vec<Label>, first_line: usize| {
        if tokens.is_empty() {
            return Ok(());
        }
        if mode == BioMode::Permissive {
            coerce_bio(labels);
        } else if let Some(at) = first_bio_violation(labels) {
            return Err(Error::Parse {
                line: first_line + at,
                message: "I tag does not follow B or I".into(),
            });
        }
        let sentence = LabeledSentence::new(std::mem::take(tokens), std::mem::take(labels))
            .map_err(|e| Error::Parse {
                line: first_line,
                message: e.to_string(),
            })?;
        sentences.push(sentence);
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut tokens, &mut labels, first_line)?;
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(token), Some(tag), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                line: line_no,
                message: "expected `token<TAB>label`".into(),
            });
        };
        validate_token(token).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let label = tag.parse::<Label>().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if tokens.is_empty() {
            first_line = line_no;
        }
        tokens.push(token.to_string());
        labels.push(label);
    }
    flush(&mut tokens, &mut labels, first_line)?;
    Ok(Corpus::new("", sentences))
}

pub fn serialize_conll(corpus: &Corpus) -> String {
    let mut out = String::new();
    for (i, sentence) in corpus.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (token, label) in sentence.tokens.iter().zip(&sentence.labels) {
            out.push_str(token);
            out.push('\t');
            out.push(label.as_char());
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(s: &str) -> Vec<Label> {
        s.chars().map(|c| c.to_string().parse().unwrap()).collect()
    }

    #[test]
    fn parses_minimal_sentence() {
        let corpus = parse_conll("The\tO\nscreen\tB\n").unwrap();
        assert_eq!(corpus.len(), 1);
        assert_eq!(corpus.sentences[0].tokens(), ["The", "screen"]);
        assert_eq!(corpus.sentences[0].labels(), [Label::O, Label::B]);
    }

    #[test]
    fn rejects_orphan_inside_tag() {
        let err = parse_conll("a\tI\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn reports_line_of_bio_violation() {
        let err = parse_conll("x\tO\n\ny\tO\nz\tI\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn permissive_mode_coerces_orphans() {
        let corpus = parse_conll_with("a\tI\nb\tI\nc\tO\nd\tI\n", BioMode::Permissive).unwrap();
        assert_eq!(corpus.sentences[0].labels(), labels("BIOB").as_slice());
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            parse_conll("a O\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_conll("a\tO\nb\tX\n"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            parse_conll("a\tO\tO\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_conll("\tO\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn multiple_blank_lines_and_missing_final_newline() {
        let corpus = parse_conll("a\tO\n\n\n\nb\tB\nc\tI").unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.sentences[1].labels(), labels("BI").as_slice());
    }

    #[test]
    fn spans_read_off_runs() {
        assert_eq!(
            spans_from_bio(&labels("OBIOB")),
            vec![Span::new(2, 3), Span::new(5, 5)]
        );
        assert!(spans_from_bio(&labels("OOO")).is_empty());
        assert_eq!(
            spans_from_bio(&labels("BB")),
            vec![Span::new(1, 1), Span::new(2, 2)]
        );
    }

    #[test]
    fn example_sentence_has_three_single_word_aspects() {
        let s = LabeledSentence::parse_pair(
            "The screen is very large and crystal clear with amazing colors and resolution",
            "OBOOOOOOOOBOB",
        )
        .unwrap();
        let spans = s.spans();
        assert_eq!(spans.len(), 3);
        assert!(spans.iter().all(|s| s.len() == 1));
        let terms: Vec<_> = s.aspect_terms().iter().map(|t| t.join(" ")).collect();
        assert_eq!(terms, ["screen", "colors", "resolution"]);
    }

    #[test]
    fn sentence_invariants() {
        assert!(LabeledSentence::new(vec![], vec![]).is_err());
        assert!(LabeledSentence::new(vec!["a".into()], vec![]).is_err());
        assert!(LabeledSentence::new(vec!["a b".into()], vec![Label::O]).is_err());
        assert!(LabeledSentence::new(vec!["".into()], vec![Label::O]).is_err());
        assert!(LabeledSentence::new(vec!["a".into()], vec![Label::I]).is_err());
    }

    fn brute_force_spans(labels: &[Label]) -> Vec<Span> {
        let mut out = Vec::new();
        for i in 0..labels.len() {
            if labels[i] == Label::B {
                let mut j = i;
                while j + 1 < labels.len() && labels[j + 1] == Label::I {
                    j += 1;
                }
                out.push(Span::new(i + 1, j + 1));
            }
        }
        out
    }

    pub(crate) fn arb_bio(max_len: usize) -> impl Strategy<Value = Vec<Label>> {
        prop::collection::vec(0..3usize, 1..=max_len).prop_map(|raw| {
            let mut labels: Vec<Label> = raw.into_iter().map(|i| Label::ALL[i]).collect();
            coerce_bio(&mut labels);
            labels
        })
    }

    fn arb_sentence() -> impl Strategy<Value = LabeledSentence> {
        arb_bio(12)
            .prop_flat_map(|labels| {
                let n = labels.len();
                (
                    Just(labels),
                    prop::collection::vec("[a-z]{1,6}|[.,!?]|ü[a-z]{0,2}", n),
                )
            })
            .prop_map(|(labels, tokens)| LabeledSentence::new(tokens, labels).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn spans_agree_with_brute_force(labels in arb_bio(20)) {
            let spans = spans_from_bio(&labels);
            prop_assert_eq!(&spans, &brute_force_spans(&labels));
            let covered: usize = spans.iter().map(Span::len).sum();
            prop_assert_eq!(covered, labels.iter().filter(|l| l.is_aspect()).count());
        }
    }

    proptest! {
        #[test]
        fn conll_round_trip(sentences in prop::collection::vec(arb_sentence(), 1..8)) {
            let corpus = Corpus::new("", sentences);
            let text = serialize_conll(&corpus);
            let parsed = parse_conll(&text).unwrap();
            prop_assert_eq!(&parsed, &corpus);
            prop_assert_eq!(serialize_conll(&parsed), text.clone());
            // final newline is optional
            let trimmed = text.trim_end_matches('\n');
            prop_assert_eq!(parse_conll(trimmed).unwrap(), corpus);
        }
    }
}
