//! Concept embedding cache and per-image concept files (JSON lines).

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::corpus::ConceptCorpus;
use super::provider::EmbeddingProvider;
use super::select::VisualConceptSet;
use crate::artifact::{read_jsonl, write_jsonl, Header, Provenance};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub concept: String,
    pub count: usize,
    pub embedding: Vec<f64>,
}

pub fn read_cache(path: &Path) -> Result<Vec<CacheRecord>> {
    Ok(read_jsonl(path)?.1)
}

/// Embeds every corpus concept (row `i` = concept `i`). With a cache path,
/// concepts already cached are reused and the merged cache is written back.
/// A provider failure writes what was embedded so far and reports it.
pub fn embed_corpus(
    corpus: &ConceptCorpus,
    provider: &dyn EmbeddingProvider,
    cache: Option<&Path>,
) -> Result<Array2<f64>> {
    embed_corpus_with_config(corpus, provider, cache, None)
}

/// [`embed_corpus`] that also records `config` in the cache header.
pub fn embed_corpus_with_config(
    corpus: &ConceptCorpus,
    provider: &dyn EmbeddingProvider,
    cache: Option<&Path>,
    config: Option<&serde_json::Value>,
) -> Result<Array2<f64>> {
    let mut cached: HashMap<String, Vec<f64>> = match cache {
        Some(p) if p.exists() => read_cache(p)?
            .into_iter()
            .map(|r| (r.concept, r.embedding))
            .collect(),
        _ => HashMap::new(),
    };
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(corpus.len());
    let mut failure = None;
    for concept in &corpus.concepts {
        if let Some(v) = cached.get(concept) {
            rows.push(v.clone());
            continue;
        }
        match provider.embed_text(concept) {
            Ok(v) => {
                cached.insert(concept.clone(), v.clone());
                rows.push(v);
            }
            Err(e) => {
                failure = Some((concept.clone(), e.to_string()));
                break;
            }
        }
    }
    if let Some(path) = cache {
        let records: Vec<CacheRecord> = corpus
            .iter()
            .zip(&rows)
            .map(|((concept, count), emb)| CacheRecord {
                concept: concept.to_string(),
                count,
                embedding: emb.clone(),
            })
            .collect();
        let header = Header {
            provenance: vec![Provenance::Embed {
                provider: provider.id(),
            }],
            config: config.cloned(),
        };
        write_jsonl(path, Some(&header), &records)?;
    }
    if let Some((item, message)) = failure {
        return Err(Error::PartialCache {
            completed: rows.len(),
            item,
            message,
        });
    }
    let dim = rows.first().map(Vec::len).unwrap_or(provider.dim());
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Record(
            "cached embeddings disagree in dimension".into(),
        ));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((corpus.len(), dim), flat).map_err(|e| Error::Record(e.to_string()))
}

/// Reads a cache file back into a corpus and its embedding matrix.
pub fn load_embedded_corpus(path: &Path, source: &str) -> Result<(ConceptCorpus, Array2<f64>)> {
    let records = read_cache(path)?;
    let dim = records.first().map(|r| r.embedding.len()).unwrap_or(0);
    let corpus = ConceptCorpus {
        concepts: records.iter().map(|r| r.concept.clone()).collect(),
        counts: records.iter().map(|r| r.count).collect(),
        source: source.to_string(),
    };
    let flat: Vec<f64> = records.into_iter().flat_map(|r| r.embedding).collect();
    let matrix = Array2::from_shape_vec((corpus.len(), dim), flat)
        .map_err(|e| Error::Record(e.to_string()))?;
    Ok((corpus, matrix))
}

pub fn write_concept_file(
    path: &Path,
    header: Option<&Header>,
    sets: &[VisualConceptSet],
) -> Result<()> {
    write_jsonl(path, header, sets)
}

pub fn read_concept_file(path: &Path) -> Result<Vec<VisualConceptSet>> {
    Ok(read_jsonl(path)?.1)
}
