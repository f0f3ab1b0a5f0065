use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Corpus;

pub type TokenId = usize;

/// Token <-> id bijection with six reserved ids.
///
/// Reserved ids, in order: `[MASK]`=0, `[BOS]`=1, `[EOS]`=2, `[PAD]`=3,
/// `[UNK]`=4, `[ASP]`=5. Corpus tokens follow from id 6.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    pub const MASK: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const PAD: TokenId = 3;
    pub const UNK: TokenId = 4;
    pub const ASP: TokenId = 5;
    pub const NUM_SPECIAL: usize = 6;
    pub const SPECIAL_TOKENS: [&'static str; 6] =
        ["[MASK]", "[BOS]", "[EOS]", "[PAD]", "[UNK]", "[ASP]"];

    /// A vocabulary containing only the reserved tokens.
    pub fn specials_only() -> Self {
        Vocab::from(Vec::<String>::new())
    }

    /// Builds a vocabulary from corpus words listed in id order (specials are
    /// prepended and duplicates ignored).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Vocab::from(words.into_iter().map(Into::into).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`Vocab::UNK`] when it is not in the vocabulary.
    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(Vocab::UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn is_special(id: TokenId) -> bool {
        id < Vocab::NUM_SPECIAL
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl From<Vec<String>> for Vocab {
    fn from(words: Vec<String>) -> Self {
        let mut tokens: Vec<String> = Vocab::SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(words);
        let mut ids = HashMap::with_capacity(tokens.len());
        let mut unique = Vec::with_capacity(tokens.len());
        for token in tokens {
            if !ids.contains_key(&token) {
                ids.insert(token.clone(), unique.len());
                unique.push(token);
            }
        }
        Vocab {
            tokens: unique,
            ids,
        }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(vocab: Vocab) -> Self {
        vocab.tokens.into_iter().skip(Vocab::NUM_SPECIAL).collect()
    }
}

/// Specials first, then tokens with frequency >= `min_count` by descending
/// frequency, ties broken lexicographically.
pub fn build_vocab(corpus: &Corpus, min_count: usize) -> Vocab {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for token in sentence.tokens() {
            *counts.entry(token.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocab::from_words(entries.into_iter().map(|(t, _)| t))
}
