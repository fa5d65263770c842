//! Grad-CAM grounding over the cross-attention of one multimodal layer.
//!
//! Relevance of patch `j` is `relu(grad * attn)` at key `j`, averaged over
//! heads and text query positions, where `grad` is the gradient of the
//! matching log-likelihood (the negated ITM loss for the positive label).

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::model::{AttentionCapture, ConceptTokens, VichaModel};
use crate::ops::cross_entropy;
use crate::{Error, Result};

/// Inclusive box in patch-grid coordinates; `x` is the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl GridBox {
    pub fn whole(grid: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: grid - 1,
            y1: grid - 1,
        }
    }

    fn check(&self, grid: usize) -> Result<()> {
        if self.x0 > self.x1 || self.y0 > self.y1 || self.x1 >= grid || self.y1 >= grid {
            return Err(Error::Config(format!(
                "box {self:?} does not fit a {grid}x{grid} grid"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedBox {
    /// Position in the input proposal list.
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: GridBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingMap {
    /// [grid, grid], row-major over patches.
    pub relevance: Array2<f64>,
    pub ranking: Vec<RankedBox>,
}

/// Cross-attention probabilities and the gradient reaching them, both
/// [heads, queries, keys], for a single text-image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGradient {
    pub probs: Array3<f64>,
    pub grads: Array3<f64>,
    /// Key range occupied by image patches.
    pub patch_keys: std::ops::Range<usize>,
}

fn to_array3(t: &Tensor) -> Result<Array3<f64>> {
    let t = t.squeeze(0)?;
    let (h, q, k) = t.dims3()?;
    Ok(
        Array3::from_shape_vec((h, q, k), t.flatten_all()?.to_vec1::<f64>()?)
            .map_err(|e| Error::Record(e.to_string()))?,
    )
}

/// Runs text `query` against `image` (with optional concepts) and backprops
/// the matching log-likelihood into the cross-attention of decoder layer
/// `layer` (1-based).
pub fn attention_gradient(
    model: &VichaModel,
    image: &ImageTensor,
    concepts: &[String],
    query: &[u32],
    layer: usize,
) -> Result<AttentionGradient> {
    let depth = model.multimodal.blocks.len();
    if layer == 0 || layer > depth {
        return Err(Error::Config(format!(
            "grounding layer {layer} outside 1..={depth}"
        )));
    }
    let tokens: Option<ConceptTokens> = if concepts.is_empty() {
        None
    } else {
        model.concept_tokens(&model.online, &[concepts.to_vec()])?
    };
    let images = VichaModel::stack_images(&[image.to_tensor()?])?;
    let vision = model.online.vision.forward(&images, tokens.as_ref())?;
    let text = model.online.text.forward(&[query.to_vec()])?;
    let mut capture = AttentionCapture::default();
    let out = model.multimodal.forward(
        text.last(),
        text.mask.as_ref(),
        vision.last(),
        vision.mask.as_ref(),
        Some((layer - 1, &mut capture)),
    )?;
    let logits = model.itm_head.forward(&out.narrow(1, 0, 1)?.squeeze(1)?)?;
    let objective = cross_entropy(&logits, &[1])?.neg()?;
    let grads = objective.backward()?;
    let probe = capture
        .probe
        .ok_or_else(|| Error::Config("attention was not captured".into()))?;
    let grad = grads
        .get(probe.as_tensor())
        .cloned()
        .unwrap_or(probe.as_tensor().zeros_like()?);
    let probs = capture
        .probs
        .ok_or_else(|| Error::Config("attention was not captured".into()))?;
    let m = model.config.num_patches();
    Ok(AttentionGradient {
        probs: to_array3(&probs)?,
        grads: to_array3(&grad)?,
        patch_keys: 1..1 + m,
    })
}

/// Rectified gradient x attention, averaged over heads and queries, laid out
/// on the `grid x grid` patch grid.
pub fn relevance_from_capture(capture: &AttentionGradient, grid: usize) -> Result<Array2<f64>> {
    let (heads, queries, keys) = capture.probs.dim();
    if capture.grads.dim() != capture.probs.dim() {
        return Err(Error::Config("attention and gradient shapes differ".into()));
    }
    let patches = capture.patch_keys.clone();
    if patches.len() != grid * grid || patches.end > keys {
        return Err(Error::Config(format!(
            "patch keys {patches:?} do not cover a {grid}x{grid} grid within {keys} keys"
        )));
    }
    let cam = (&capture.probs * &capture.grads).mapv(|v| v.max(0.0));
    let per_key =
        cam.sum_axis(ndarray::Axis(0)).sum_axis(ndarray::Axis(0)) / (heads * queries) as f64;
    let values = per_key
        .slice(ndarray::s![patches.start..patches.end])
        .to_vec();
    Ok(Array2::from_shape_vec((grid, grid), values).map_err(|e| Error::Record(e.to_string()))?)
}

/// Incremental mean; exact when every value is equal.
fn running_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, v) in values.enumerate() {
        mean += (v - mean) / (k + 1) as f64;
    }
    mean
}

/// Scores each box by its mean relevance; descending, ties in input order.
pub fn rank_proposals(relevance: &Array2<f64>, proposals: &[GridBox]) -> Result<Vec<RankedBox>> {
    let grid = relevance.nrows();
    let mut ranked = proposals
        .iter()
        .enumerate()
        .map(|(index, b)| {
            b.check(grid)?;
            let cells = relevance.slice(ndarray::s![b.y0..=b.y1, b.x0..=b.x1]);
            Ok(RankedBox {
                index,
                bbox: *b,
                score: running_mean(cells.iter().copied()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(ranked)
}

pub fn grad_cam_grounding(
    model: &VichaModel,
    image: &ImageTensor,
    concepts: &[String],
    query: &[u32],
    proposals: &[GridBox],
    layer: usize,
) -> Result<GroundingMap> {
    let capture = attention_gradient(model, image, concepts, query, layer)?;
    let relevance = relevance_from_capture(&capture, model.config.grid_size())?;
    let ranking = rank_proposals(&relevance, proposals)?;
    Ok(GroundingMap { relevance, ranking })
}
