use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::Corpus;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[MASK]"];

/// Bijection between token strings and contiguous ids. Ids below 3 are
/// reserved and never produced from text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-reserved tokens given in id order
    /// (the first one gets id 3).
    pub fn from_tokens<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens.into_iter().map(Into::into));
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens: all, index }
    }

    /// Tokens with corpus frequency >= `min_freq` get ids in descending
    /// frequency order, ties broken lexicographically.
    pub fn build(corpus: &Corpus, min_freq: usize) -> Self {
        Self::from_word_lists(corpus.documents.iter().map(|d| d.words.as_slice()), min_freq)
    }

    pub(crate) fn from_word_lists<'a>(
        docs: impl IntoIterator<Item = &'a [String]>,
        min_freq: usize,
    ) -> Self {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for words in docs {
            for w in words {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(w, n)| n >= min_freq.max(1) && !RESERVED.contains(&w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(w, _)| w.to_string()))
    }

    /// Parses the `vocab.txt` format: one token per line, line index = id,
    /// the three reserved tokens first.
    pub fn from_text(text: &str) -> Option<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..3] != RESERVED {
            return None;
        }
        let vocab = Self::from_tokens(lines[3..].iter().copied());
        (vocab.index.len() == vocab.tokens.len()).then_some(vocab)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// Hex SHA-256 of the `vocab.txt` serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Id of `token`, or `UNK` when unseen.
    pub fn id(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&id) if id >= 3 => id,
            _ => UNK,
        }
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied().filter(|&id| id >= 3)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }
}
