//! Image-text matching with in-batch hard negatives.

use candle_core::Tensor;
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::model::layers::Linear;
use crate::model::params::Scope;
use crate::ops::cross_entropy;
use crate::{Error, Result};

/// For image `i`, `text_for_image[i]` is a sampled negative caption; for
/// caption `j`, `image_for_text[j]` is a sampled negative image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegatives {
    pub text_for_image: Vec<usize>,
    pub image_for_text: Vec<usize>,
}

fn sample_excluding<R: Rng + ?Sized>(scores: &[f64], exclude: usize, rng: &mut R) -> usize {
    let max = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != exclude)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(j, s)| if j == exclude { 0.0 } else { (s - max).exp() })
        .collect();
    WeightedIndex::new(&weights)
        .expect("at least one off-diagonal weight is positive")
        .sample(rng)
}

/// Samples negatives with probability softmax(similarity) over the
/// off-diagonal entries of row `i` (texts for image `i`) and of column `j`
/// (images for text `j`). `similarity[[i, j]]` compares image `i` with text `j`.
pub fn mine_hard_negatives<R: Rng + ?Sized>(
    similarity: &Array2<f64>,
    rng: &mut R,
) -> Result<HardNegatives> {
    let (rows, cols) = similarity.dim();
    if rows != cols {
        return Err(Error::Config(format!("similarity matrix is {rows}x{cols}")));
    }
    if rows < 2 {
        return Err(Error::Mining(rows));
    }
    let text_for_image = (0..rows)
        .map(|i| {
            let row: Vec<f64> = similarity.row(i).to_vec();
            sample_excluding(&row, i, rng)
        })
        .collect();
    let image_for_text = (0..cols)
        .map(|j| {
            let col: Vec<f64> = similarity.column(j).to_vec();
            sample_excluding(&col, j, rng)
        })
        .collect();
    Ok(HardNegatives {
        text_for_image,
        image_for_text,
    })
}

/// Two-way classifier on the multimodal class token; class 1 = matched.
#[derive(Debug, Clone)]
pub struct ItmHead {
    pub linear: Linear,
}

impl ItmHead {
    pub fn new(scope: &Scope, hidden: usize) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(scope, hidden, 2)?,
        })
    }

    pub fn forward(&self, cls: &Tensor) -> Result<Tensor> {
        self.linear.forward(cls)
    }
}

/// Cross-entropy over B positive ([B, 2] logits, label 1) and 2B negative
/// ([2B, 2] logits, label 0) instances, averaged over all 3B.
pub fn itm_loss(positive_logits: &Tensor, negative_logits: &Tensor) -> Result<Tensor> {
    let p = positive_logits.dim(0)?;
    let n = negative_logits.dim(0)?;
    let logits = Tensor::cat(&[positive_logits, negative_logits], 0)?;
    let labels: Vec<u32> = std::iter::repeat_n(1, p)
        .chain(std::iter::repeat_n(0, n))
        .collect();
    cross_entropy(&logits, &labels)
}
