//! Masked image modelling: unimodal (small transformer decoder over the
//! image tokens) and multimodal (shared multimodal decoder attending to text).

use candle_core::Tensor;
use rand::Rng;

use crate::model::config::ModelConfig;
use crate::model::layers::{EncoderBlock, Linear};
use crate::model::multimodal::MultimodalDecoder;
use crate::model::params::Scope;
use crate::ops::{device, DTYPE};
use crate::{Error, Result};

pub const DEFAULT_MASK_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum MimVariant {
    /// Reconstruct from image tokens only.
    #[default]
    #[serde(alias = "u", alias = "unimodal")]
    U,
    /// Reconstruct through the multimodal decoder with text as keys.
    #[serde(alias = "m", alias = "multimodal")]
    M,
}

/// Partition of the patch grid; both lists sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageMaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl ImageMaskPlan {
    pub fn num_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// Masks `round(ratio * patches)` patches chosen uniformly without replacement.
pub fn plan_image_mask<R: Rng + ?Sized>(
    patches: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<ImageMaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "image mask ratio {ratio} outside [0, 1)"
        )));
    }
    let count = (ratio * patches as f64).round() as usize;
    let mut is_masked = vec![false; patches];
    for i in rand::seq::index::sample(rng, patches, count) {
        is_masked[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..patches).partition(|&i| is_masked[i]);
    Ok(ImageMaskPlan { visible, masked })
}

/// Mean squared error between predicted and true patch pixels, over masked
/// patches only. Inputs are [B, M, P]. No masked patches gives 0.
pub fn masked_patch_mse(
    prediction: &Tensor,
    target: &Tensor,
    plans: &[ImageMaskPlan],
) -> Result<Tensor> {
    let (b, m, p) = prediction.dims3()?;
    if target.dims3()? != (b, m, p) || plans.len() != b {
        return Err(Error::Config(
            "prediction, target and plans disagree in shape".into(),
        ));
    }
    let rows: Vec<u32> = plans
        .iter()
        .enumerate()
        .flat_map(|(s, plan)| plan.masked.iter().map(move |&i| (s * m + i) as u32))
        .collect();
    if rows.is_empty() {
        return Ok(Tensor::zeros((), DTYPE, &device())?);
    }
    let n = rows.len();
    let idx = Tensor::from_vec(rows, n, &device())?;
    let pred = prediction.reshape((b * m, p))?.index_select(&idx, 0)?;
    let tgt = target.reshape((b * m, p))?.index_select(&idx, 0)?;
    Ok(((pred - tgt)?.sqr()?.sum_all()? / (n * p) as f64)?)
}

/// Mask token, decoder positions and both reconstruction heads.
#[derive(Debug, Clone)]
pub struct MimHead {
    pub mask_token: Tensor,
    /// [1 + M, H], added to every decoder input row.
    pub decoder_position: Tensor,
    /// Unimodal decoder blocks.
    pub blocks: Vec<EncoderBlock>,
    /// Unimodal hidden -> patch pixels.
    pub predict: Linear,
    /// Multimodal hidden -> patch pixels (F).
    pub pixel_projection: Linear,
}

impl MimHead {
    pub fn new(scope: &Scope, config: &ModelConfig) -> Result<Self> {
        let h = config.hidden_dim;
        Ok(Self {
            mask_token: scope.normal(h, "mask_token")?,
            decoder_position: scope.normal((1 + config.num_patches(), h), "decoder_position")?,
            blocks: (0..config.mim_decoder_layers)
                .map(|i| {
                    EncoderBlock::new(
                        &scope.pp(format!("decoder.{i}")),
                        h,
                        config.mim_decoder_heads,
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<_>>()?,
            predict: Linear::new(&scope.pp("predict"), h, config.patch_dim())?,
            pixel_projection: Linear::new(&scope.pp("pixel_projection"), h, config.patch_dim())?,
        })
    }

    /// Rebuilds the full-length sequence [B, 1 + M, H]: the encoded class
    /// token, encoded visible tokens at their grid slots, and the mask token
    /// everywhere else; decoder positions are added to every row.
    pub fn decoder_input(&self, encoded: &Tensor, plans: &[ImageMaskPlan]) -> Result<Tensor> {
        let (b, len, h) = encoded.dims3()?;
        let dev = device();
        let rows = plans
            .iter()
            .enumerate()
            .map(|(s, plan)| {
                let nv = plan.visible.len();
                let nm = plan.masked.len();
                if len != nv + 1 {
                    return Err(Error::InvalidMask(format!(
                        "encoded length {len} does not match {nv} visible patches"
                    )));
                }
                let sample = encoded.get(s)?;
                let pool = if nm == 0 {
                    sample
                } else {
                    let masks = self.mask_token.reshape((1, h))?.broadcast_as((nm, h))?;
                    Tensor::cat(&[&sample, &masks], 0)?
                };
                let mut order = vec![0u32; 1 + plan.num_patches()];
                for (rank, &p) in plan.visible.iter().enumerate() {
                    order[1 + p] = (1 + rank) as u32;
                }
                for (rank, &p) in plan.masked.iter().enumerate() {
                    order[1 + p] = (1 + nv + rank) as u32;
                }
                let n = order.len();
                Ok(pool.index_select(&Tensor::from_vec(order, n, &dev)?, 0)?)
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.len() != b {
            return Err(Error::Config("one mask plan per sample required".into()));
        }
        Ok(Tensor::stack(&rows, 0)?.broadcast_add(&self.decoder_position)?)
    }

    /// Predicted patches [B, M, P] from image tokens only.
    pub fn reconstruct_unimodal(
        &self,
        encoded: &Tensor,
        plans: &[ImageMaskPlan],
    ) -> Result<Tensor> {
        let mut x = self.decoder_input(encoded, plans)?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        let m = x.dim(1)? - 1;
        self.predict.forward(&x.narrow(1, 1, m)?)
    }

    /// Predicted patches [B, M, P] from the shared multimodal decoder with the
    /// image sequence as queries and `text` as keys and values.
    pub fn reconstruct_multimodal(
        &self,
        encoded: &Tensor,
        plans: &[ImageMaskPlan],
        decoder: &MultimodalDecoder,
        text: &Tensor,
        text_mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let queries = self.decoder_input(encoded, plans)?;
        let out = decoder.forward(&queries, None, text, text_mask, None)?;
        let m = out.dim(1)? - 1;
        self.pixel_projection.forward(&out.narrow(1, 1, m)?)
    }
}

/// Unimodal reconstruction loss from a masked, concept-free vision forward.
pub fn u_mim_loss(
    head: &MimHead,
    encoded: &Tensor,
    plans: &[ImageMaskPlan],
    target_patches: &Tensor,
) -> Result<Tensor> {
    let pred = head.reconstruct_unimodal(encoded, plans)?;
    masked_patch_mse(&pred, target_patches, plans)
}

/// Multimodal reconstruction loss through the shared decoder.
pub fn m_mim_loss(
    head: &MimHead,
    encoded: &Tensor,
    plans: &[ImageMaskPlan],
    decoder: &MultimodalDecoder,
    text: &Tensor,
    text_mask: Option<&Tensor>,
    target_patches: &Tensor,
) -> Result<Tensor> {
    let pred = head.reconstruct_multimodal(encoded, plans, decoder, text, text_mask)?;
    masked_patch_mse(&pred, target_patches, plans)
}
