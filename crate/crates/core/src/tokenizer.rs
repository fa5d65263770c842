//! Deterministic whitespace tokenizer with BERT-style special tokens.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;

/// Number of reserved ids at the front of every vocabulary.
pub const NUM_SPECIALS: u32 = 4;

/// Lowercases and splits on whitespace, trimming ASCII punctuation from each
/// word. Words that are pure punctuation are dropped.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a vocabulary from every word in `texts`, sorted for stable ids.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize_words).collect();
        let tokens = [PAD, UNK, CLS, MASK]
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize_words(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| {
                self.tokens
                    .get(i as usize)
                    .map(String::as_str)
                    .unwrap_or(UNK)
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIALS
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("token list serializes")
    }

    pub fn from_json(s: &str) -> crate::Result<Self> {
        Ok(Self::from_tokens(serde_json::from_str(s)?))
    }
}
