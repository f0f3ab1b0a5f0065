//! Template grammar for synthetic review corpora.
//!
//! The grammar file is line oriented:
//!
//! ```text
//! # comment
//! POOL ASP screen keyboard battery+life
//! POOL ADJ good great
//! TEMPLATE the {ASP} is {ADJ}
//! ```
//!
//! `{NAME}` is a slot filled with a uniformly drawn entry of pool `NAME`.
//! Slots whose pool name starts with `ASP` are aspect slots and are labeled
//! `B I*`; every other word is labeled `O`. A `+` inside a pool entry joins
//! several words into one multi-word entry (`battery+life` emits `battery
//! life`). Templates are drawn uniformly, so repeating a line weights it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, Label, LabeledSentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(String),
}

#[derive(Debug, Clone)]
pub struct Grammar {
    templates: Vec<Vec<Piece>>,
    pools: BTreeMap<String, Vec<Vec<String>>>,
}

fn is_aspect_pool(name: &str) -> bool {
    name.starts_with("ASP")
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Grammar> {
        let mut templates = Vec::new();
        let mut pools: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut words = line.split_whitespace();
            match words.next() {
                Some("TEMPLATE") => {
                    let pieces: Vec<Piece> = words
                        .map(
                            |w| match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                                Some(name) => Piece::Slot(name.to_string()),
                                None => Piece::Word(w.to_string()),
                            },
                        )
                        .collect();
                    if pieces.is_empty() {
                        return Err(Error::Template(format!("line {}: empty template", idx + 1)));
                    }
                    templates.push(pieces);
                }
                Some("POOL") => {
                    let name = words.next().ok_or_else(|| {
                        Error::Template(format!("line {}: POOL without a name", idx + 1))
                    })?;
                    let entries = pools.entry(name.to_string()).or_default();
                    for entry in words {
                        let parts: Vec<String> = entry
                            .split('+')
                            .filter(|p| !p.is_empty())
                            .map(str::to_string)
                            .collect();
                        if !parts.is_empty() {
                            entries.push(parts);
                        }
                    }
                }
                Some(other) => {
                    return Err(Error::Template(format!(
                        "line {}: unknown record `{other}`",
                        idx + 1
                    )))
                }
                None => unreachable!(),
            }
        }
        if templates.is_empty() {
            return Err(Error::Template("no TEMPLATE records".into()));
        }
        for template in &templates {
            for piece in template {
                if let Piece::Slot(name) = piece {
                    match pools.get(name) {
                        None => {
                            return Err(Error::Template(format!("slot {{{name}}} has no POOL")))
                        }
                        Some(entries) if entries.is_empty() => {
                            return Err(Error::Template(format!("POOL {name} is empty")))
                        }
                        _ => {}
                    }
                }
            }
        }
        Ok(Grammar { templates, pools })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Grammar> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Grammar::parse(&text)
    }

    /// Every word that can appear inside an aspect term.
    pub fn aspect_words(&self) -> BTreeSet<String> {
        self.pools
            .iter()
            .filter(|(name, _)| is_aspect_pool(name))
            .flat_map(|(_, entries)| entries.iter().flatten().cloned())
            .collect()
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> LabeledSentence {
        let template = self.templates.choose(rng).expect("grammar has templates");
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        for piece in template {
            match piece {
                Piece::Word(w) => {
                    tokens.push(w.clone());
                    labels.push(Label::O);
                }
                Piece::Slot(name) => {
                    let entry = self.pools[name].choose(rng).expect("pool is non-empty");
                    let aspect = is_aspect_pool(name);
                    for (i, w) in entry.iter().enumerate() {
                        tokens.push(w.clone());
                        labels.push(match (aspect, i) {
                            (false, _) => Label::O,
                            (true, 0) => Label::B,
                            (true, _) => Label::I,
                        });
                    }
                }
            }
        }
        LabeledSentence::new(tokens, labels).expect("template words are whitespace-free")
    }

    pub fn generate(&self, seed: u64, n_sentences: usize) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences = (0..n_sentences).map(|_| self.sample(&mut rng)).collect();
        Corpus::new(format!("synthetic-{seed}"), sentences)
    }
}

/// Deterministically samples `n_sentences` from the grammar in `template_file`.
pub fn generate_synthetic_corpus(
    grammar_seed: u64,
    n_sentences: usize,
    template_file: impl AsRef<Path>,
) -> Result<Corpus> {
    if n_sentences == 0 {
        return Err(Error::Config("n_sentences must be positive".into()));
    }
    Ok(Grammar::from_file(template_file)?.generate(grammar_seed, n_sentences))
}
