//! Two-stage image-text retrieval: dual-encoder cosine ranking, then ITM
//! re-ranking of the top `m` candidates.

use std::collections::BTreeMap;

use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::model::{LayeredBatch, VichaModel};
use crate::ops::softmax_last;
use crate::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
const SCORE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub text_to_image: BTreeMap<usize, f64>,
    pub image_to_text: BTreeMap<usize, f64>,
    pub rsum: f64,
}

impl RetrievalResult {
    pub fn from_rankings(text_to_image: &[Vec<usize>], image_to_text: &[Vec<usize>]) -> Self {
        let t2i = recall_at(text_to_image);
        let i2t = recall_at(image_to_text);
        let rsum = (t2i.values().sum::<f64>() + i2t.values().sum::<f64>()) * 100.0;
        Self {
            text_to_image: t2i,
            image_to_text: i2t,
            rsum,
        }
    }
}

/// Recall@K for rankings whose query `q` has target `q`.
pub fn recall_at(rankings: &[Vec<usize>]) -> BTreeMap<usize, f64> {
    RECALL_KS
        .iter()
        .map(|&k| {
            let hits = rankings
                .iter()
                .enumerate()
                .filter(|(q, r)| r.iter().take(k).any(|&c| c == *q))
                .count();
            let frac = if rankings.is_empty() {
                0.0
            } else {
                hits as f64 / rankings.len() as f64
            };
            (k, frac)
        })
        .collect()
}

/// Orders `candidates` by descending score; equal scores keep input order.
fn sort_desc(candidates: &mut [usize], score: impl Fn(usize) -> f64) {
    candidates.sort_by(|&a, &b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
}

/// Rankings in both directions over a [texts, images] stage-one score matrix.
/// `rerank` receives (text, image) pairs and returns one score per pair; only
/// the top `m` of each stage-one ranking are re-scored, the rest keep their
/// stage-one order.
pub fn two_stage_rankings(
    stage_one: &Array2<f64>,
    m: usize,
    rerank: &mut dyn FnMut(&[(usize, usize)]) -> Result<Vec<f64>>,
) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
    let (texts, images) = stage_one.dim();
    let mut rank = |n_queries: usize,
                    n_candidates: usize,
                    pair: &dyn Fn(usize, usize) -> (usize, usize)|
     -> Result<Vec<Vec<usize>>> {
        let depth = m.min(n_candidates);
        let mut out = Vec::with_capacity(n_queries);
        for q in 0..n_queries {
            let mut order: Vec<usize> = (0..n_candidates).collect();
            sort_desc(&mut order, |c| {
                let (t, i) = pair(q, c);
                stage_one[[t, i]]
            });
            let pairs: Vec<(usize, usize)> = order[..depth].iter().map(|&c| pair(q, c)).collect();
            let scores = rerank(&pairs)?;
            if scores.len() != depth {
                return Err(Error::Config(format!(
                    "rerank returned {} scores for {depth} pairs",
                    scores.len()
                )));
            }
            let by_candidate: BTreeMap<usize, f64> =
                order[..depth].iter().copied().zip(scores).collect();
            sort_desc(&mut order[..depth], |c| by_candidate[&c]);
            out.push(order);
        }
        Ok(out)
    };
    let t2i = rank(texts, images, &|q, c| (q, c))?;
    let i2t = rank(images, texts, &|q, c| (c, q))?;
    Ok((t2i, i2t))
}

/// Encoded gallery and queries, ready for scoring.
pub struct RetrievalFeatures {
    pub images: LayeredBatch,
    pub texts: LayeredBatch,
    /// Cosine similarity of last-layer projections, [texts, images].
    pub similarity: Array2<f64>,
}

pub fn encode_for_retrieval(
    model: &VichaModel,
    images: &[ImageTensor],
    concepts: Option<&[Vec<String>]>,
    captions: &[Vec<u32>],
) -> Result<RetrievalFeatures> {
    let tensors = images
        .iter()
        .map(ImageTensor::to_tensor)
        .collect::<Result<Vec<_>>>()?;
    let image_batch = model.encode_images(
        &model.online,
        &VichaModel::stack_images(&tensors)?,
        concepts,
    )?;
    let text_batch = model.online.text.forward(captions)?;
    let (v, t) = model.hitc.project_last(
        &image_batch.class_tokens(image_batch.layers.len() - 1)?,
        &text_batch.class_tokens(text_batch.layers.len() - 1)?,
    )?;
    let sim = t.matmul(&v.t()?)?.to_vec2::<f64>()?;
    let similarity = Array2::from_shape_fn((sim.len(), images.len()), |(r, c)| sim[r][c]);
    Ok(RetrievalFeatures {
        images: image_batch.detach(),
        texts: text_batch.detach(),
        similarity,
    })
}

/// Positive-class ITM probability of each (text, image) pair.
pub fn itm_scores(
    model: &VichaModel,
    features: &RetrievalFeatures,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(SCORE_CHUNK) {
        let ts: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let is: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let logits =
            model.itm_logits(&features.texts.select(&ts)?, &features.images.select(&is)?)?;
        let probs: Tensor = softmax_last(&logits)?;
        out.extend(probs.narrow(1, 1, 1)?.squeeze(1)?.to_vec1::<f64>()?);
    }
    Ok(out)
}

/// Caption `i` describes image `i`. Concepts are used as given, without
/// augmentation.
pub fn retrieval_eval(
    model: &VichaModel,
    images: &[ImageTensor],
    concepts: Option<&[Vec<String>]>,
    captions: &[Vec<u32>],
    m: usize,
) -> Result<RetrievalResult> {
    if images.is_empty() || images.len() != captions.len() {
        return Err(Error::Config(format!(
            "retrieval needs matching non-empty galleries, got {} images and {} captions",
            images.len(),
            captions.len()
        )));
    }
    let n = images.len();
    let mut m = m;
    if m > n {
        log::warn!("rerank depth {m} exceeds gallery size {n}; clamping");
        m = n;
    }
    if m < RECALL_KS[2].min(n) {
        log::warn!("rerank depth {m} is below the deepest recall cut-off evaluated");
    }
    let features = encode_for_retrieval(model, images, concepts, captions)?;
    let (t2i, i2t) = two_stage_rankings(&features.similarity, m, &mut |pairs| {
        itm_scores(model, &features, pairs)
    })?;
    Ok(RetrievalResult::from_rankings(&t2i, &i2t))
}
