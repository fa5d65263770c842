//! Per-image concept selection and visual-concept augmentation.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::ConceptCorpus;
use super::provider::normalize;
use crate::{Error, Result};

pub const DEFAULT_K: usize = 15;
pub const DEFAULT_P_VC: f64 = 0.30;

/// Concepts chosen for one image, best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisualConceptSet {
    pub image_id: String,
    pub concepts: Vec<String>,
    pub scores: Vec<f64>,
}

impl VisualConceptSet {
    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    /// Keeps the first `k` entries.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            image_id: self.image_id.clone(),
            concepts: self.concepts.iter().take(k).cloned().collect(),
            scores: self.scores.iter().take(k).copied().collect(),
        }
    }
}

/// Indices of the `k` largest scores, descending, ties by lower index.
pub fn top_k_indices(scores: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Ranks corpus concepts by cosine similarity with the image. Rows of
/// `corpus_embeddings` must be unit-norm and follow corpus order; the image
/// embedding is normalised here. `k` larger than the corpus returns the whole
/// corpus, sorted.
pub fn select_top_k(
    image_id: &str,
    image_embedding: &[f64],
    corpus: &ConceptCorpus,
    corpus_embeddings: &Array2<f64>,
    k: usize,
) -> Result<VisualConceptSet> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if corpus_embeddings.nrows() != corpus.len() {
        return Err(Error::Config(format!(
            "{} embedding rows for {} concepts",
            corpus_embeddings.nrows(),
            corpus.len()
        )));
    }
    if corpus.is_empty() {
        return Ok(VisualConceptSet {
            image_id: image_id.to_string(),
            ..Default::default()
        });
    }
    if corpus_embeddings.ncols() != image_embedding.len() {
        return Err(Error::Config(format!(
            "image embedding of dim {} against concept embeddings of dim {}",
            image_embedding.len(),
            corpus_embeddings.ncols()
        )));
    }
    let query = ndarray::Array1::from(normalize(image_embedding.to_vec())?);
    let scores = corpus_embeddings.dot(&query);
    let top = top_k_indices(scores.view(), k);
    Ok(VisualConceptSet {
        image_id: image_id.to_string(),
        concepts: top.iter().map(|&i| corpus.concepts[i].clone()).collect(),
        scores: top.iter().map(|&i| scores[i]).collect(),
    })
}

/// Subset size used by [`vca_sample`]: round-half-up, at least 1.
pub fn vca_subset_size(n: usize, p_vc: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((p_vc * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

/// Uniformly samples `vca_subset_size(n, p_vc)` concepts without replacement,
/// keeping the original score order among the survivors.
pub fn vca_sample<R: Rng + ?Sized>(
    set: &VisualConceptSet,
    p_vc: f64,
    rng: &mut R,
) -> Result<VisualConceptSet> {
    if !(p_vc > 0.0 && p_vc <= 1.0) {
        return Err(Error::Config(format!("p_vc {p_vc} outside (0, 1]")));
    }
    let n = set.len();
    let size = vca_subset_size(n, p_vc);
    if size == n {
        return Ok(set.clone());
    }
    let mut keep: Vec<usize> = rand::seq::index::sample(rng, n, size).into_vec();
    keep.sort_unstable();
    Ok(VisualConceptSet {
        image_id: set.image_id.clone(),
        concepts: keep.iter().map(|&i| set.concepts[i].clone()).collect(),
        scores: keep.iter().map(|&i| set.scores[i]).collect(),
    })
}
