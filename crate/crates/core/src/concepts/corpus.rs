//! Concept corpus built from captions.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::tokenizer::normalize_words;

/// Turns a caption into candidate concept phrases.
pub trait ConceptExtractor {
    fn extract(&self, caption: &str) -> Vec<String>;
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "on", "in", "of", "at", "to", "with", "and", "or", "is", "are", "was",
    "were", "be", "been", "being", "it", "its", "this", "that", "these", "those", "there", "some",
    "for", "from", "by", "near", "next", "under", "over", "into", "onto", "as", "while", "his",
    "her", "their", "he", "she", "they", "them", "very", "has", "have", "out", "up", "down", "off",
    "one", "two", "three", "several", "many", "other", "another",
];

/// Lowercased content words and bigrams of adjacent content words.
#[derive(Debug, Clone)]
pub struct PhraseExtractor {
    stop_words: HashSet<String>,
}

impl Default for PhraseExtractor {
    fn default() -> Self {
        Self::with_stop_words(STOP_WORDS.iter().copied())
    }
}

impl PhraseExtractor {
    pub fn with_stop_words<'a, I: IntoIterator<Item = &'a str>>(words: I) -> Self {
        Self {
            stop_words: words.into_iter().map(str::to_string).collect(),
        }
    }
}

impl ConceptExtractor for PhraseExtractor {
    fn extract(&self, caption: &str) -> Vec<String> {
        let words = normalize_words(caption);
        let content: Vec<Option<&String>> = words
            .iter()
            .map(|w| (!self.stop_words.contains(w)).then_some(w))
            .collect();
        let mut out: Vec<String> = content.iter().flatten().map(|w| w.to_string()).collect();
        for pair in content.windows(2) {
            if let [Some(a), Some(b)] = pair {
                out.push(format!("{a} {b}"));
            }
        }
        out
    }
}

/// Lowercase concepts seen at least twice, sorted alphabetically.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptCorpus {
    pub concepts: Vec<String>,
    pub counts: Vec<usize>,
    pub source: String,
}

impl ConceptCorpus {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.concepts
            .iter()
            .map(String::as_str)
            .zip(self.counts.iter().copied())
    }

    /// Union of several per-source corpora; counts add up.
    pub fn merge<'a, I: IntoIterator<Item = &'a ConceptCorpus>>(corpora: I, source: &str) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in corpora {
            for (concept, n) in c.iter() {
                *counts.entry(concept.to_string()).or_default() += n;
            }
        }
        let (concepts, counts) = counts.into_iter().unzip();
        Self {
            concepts,
            counts,
            source: source.to_string(),
        }
    }
}

/// Counts every extracted phrase over all captions and keeps those occurring
/// at least twice.
pub fn build_corpus<S: AsRef<str>>(
    captions: &[S],
    extractor: &dyn ConceptExtractor,
    source: &str,
) -> ConceptCorpus {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for caption in captions {
        for phrase in extractor.extract(caption.as_ref()) {
            let phrase = phrase.to_lowercase();
            if !phrase.trim().is_empty() {
                *counts.entry(phrase).or_default() += 1;
            }
        }
    }
    let (concepts, counts) = counts.into_iter().filter(|(_, n)| *n >= 2).unzip();
    ConceptCorpus {
        concepts,
        counts,
        source: source.to_string(),
    }
}
