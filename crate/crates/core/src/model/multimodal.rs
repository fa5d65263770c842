use candle_core::Tensor;

use super::config::ModelConfig;
use super::layers::{AttentionCapture, DecoderBlock, LayerNorm, Linear, Mlp, MultiHeadAttention};
use super::params::Scope;
use crate::{Error, Result};

/// Cross-attention decoder: queries attend to themselves, then to a second
/// sequence used as keys and values.
#[derive(Clone, Debug)]
pub struct MultimodalDecoder {
    pub blocks: Vec<DecoderBlock>,
    pub hidden_dim: usize,
}

impl MultimodalDecoder {
    pub fn new(scope: &Scope, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            blocks: (0..config.multimodal_layers)
                .map(|i| {
                    DecoderBlock::new(
                        &scope.pp(format!("layers.{i}")),
                        config.hidden_dim,
                        config.num_heads,
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<_>>()?,
            hidden_dim: config.hidden_dim,
        })
    }

    /// Returns the last layer's output, same length as `queries`. When
    /// `capture` is given, the cross-attention of that layer index is
    /// recorded.
    pub fn forward(
        &self,
        queries: &Tensor,
        query_mask: Option<&Tensor>,
        keys_values: &Tensor,
        key_mask: Option<&Tensor>,
        mut capture: Option<(usize, &mut AttentionCapture)>,
    ) -> Result<Tensor> {
        let qw = queries.dim(2)?;
        let kw = keys_values.dim(2)?;
        if qw != self.hidden_dim || kw != self.hidden_dim {
            return Err(Error::Config(format!(
                "decoder width {} but got queries {qw} / keys {kw}",
                self.hidden_dim
            )));
        }
        if let Some((layer, _)) = &capture {
            if *layer >= self.blocks.len() {
                return Err(Error::Config(format!(
                    "capture layer {layer} outside decoder depth {}",
                    self.blocks.len()
                )));
            }
        }
        let mut x = queries.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            let cap = match capture.as_mut() {
                Some((layer, cap)) if *layer == i => Some(&mut **cap),
                _ => None,
            };
            x = block.forward(&x, query_mask, keys_values, key_mask, cap)?;
        }
        Ok(x)
    }

    pub fn num_parameters(&self) -> usize {
        self.blocks.iter().map(block_parameters).sum()
    }
}

fn block_parameters(b: &DecoderBlock) -> usize {
    let ln = |l: &LayerNorm| l.num_parameters();
    let mlp = |m: &Mlp| m.fc1.num_parameters() + m.fc2.num_parameters();
    b.self_attention.num_parameters()
        + ln(&b.self_norm)
        + b.cross_attention.num_parameters()
        + ln(&b.cross_norm)
        + mlp(&b.mlp)
        + ln(&b.mlp_norm)
}

/// Parameters of a decoder layer that are not shared between the two
/// branches of a [`PairedDecoder`].
pub fn unshared_layer_parameters(b: &DecoderBlock) -> usize {
    block_parameters(b)
        - b.cross_attention.key.num_parameters()
        - b.cross_attention.value.num_parameters()
}

/// Decoder replicated for two images. Branch A is the original decoder;
/// branch B is a copy of every layer whose cross-attention key and value
/// projections are the very same tensors as branch A's.
#[derive(Clone, Debug)]
pub struct PairedDecoder {
    pub branch_a: MultimodalDecoder,
    pub branch_b: MultimodalDecoder,
    /// Concatenated class tokens [2H] -> H.
    pub merge: Linear,
}

pub fn replicate_multimodal_for_pair(
    decoder: &MultimodalDecoder,
    scope: &Scope,
) -> Result<PairedDecoder> {
    let copy_ln = |s: &Scope, l: &LayerNorm| LayerNorm::copy_of(s, l);
    let blocks = decoder
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let s = scope.pp(format!("branch_b.layers.{i}"));
            let copy_attn =
                |s: &Scope, a: &MultiHeadAttention, share_kv: bool| -> Result<MultiHeadAttention> {
                    Ok(MultiHeadAttention {
                        query: Linear::copy_of(&s.pp("query"), &a.query)?,
                        key: if share_kv {
                            a.key.clone()
                        } else {
                            Linear::copy_of(&s.pp("key"), &a.key)?
                        },
                        value: if share_kv {
                            a.value.clone()
                        } else {
                            Linear::copy_of(&s.pp("value"), &a.value)?
                        },
                        output: Linear::copy_of(&s.pp("output"), &a.output)?,
                        num_heads: a.num_heads,
                    })
                };
            Ok(DecoderBlock {
                self_attention: copy_attn(&s.pp("self_attention"), &b.self_attention, false)?,
                self_norm: copy_ln(&s.pp("self_norm"), &b.self_norm)?,
                cross_attention: copy_attn(&s.pp("cross_attention"), &b.cross_attention, true)?,
                cross_norm: copy_ln(&s.pp("cross_norm"), &b.cross_norm)?,
                mlp: Mlp {
                    fc1: Linear::copy_of(&s.pp("mlp.fc1"), &b.mlp.fc1)?,
                    fc2: Linear::copy_of(&s.pp("mlp.fc2"), &b.mlp.fc2)?,
                },
                mlp_norm: copy_ln(&s.pp("mlp_norm"), &b.mlp_norm)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let h = decoder.hidden_dim;
    Ok(PairedDecoder {
        branch_a: decoder.clone(),
        branch_b: MultimodalDecoder {
            blocks,
            hidden_dim: h,
        },
        merge: Linear::new(&scope.pp("merge"), 2 * h, h)?,
    })
}

/// Keys/values and validity mask of one image for the paired decoder.
pub type ImageKeys<'a> = (&'a Tensor, Option<&'a Tensor>);

impl PairedDecoder {
    /// Runs both branches and returns their last-layer outputs.
    pub fn forward_branches(
        &self,
        text: &Tensor,
        text_mask: Option<&Tensor>,
        image_a: ImageKeys<'_>,
        image_b: ImageKeys<'_>,
    ) -> Result<(Tensor, Tensor)> {
        let a = self
            .branch_a
            .forward(text, text_mask, image_a.0, image_a.1, None)?;
        let b = self
            .branch_b
            .forward(text, text_mask, image_b.0, image_b.1, None)?;
        Ok((a, b))
    }

    /// Merged class token [B, H]: concatenated branch class tokens, projected
    /// and rectified.
    pub fn forward(
        &self,
        text: &Tensor,
        text_mask: Option<&Tensor>,
        image_a: ImageKeys<'_>,
        image_b: ImageKeys<'_>,
    ) -> Result<Tensor> {
        let (a, b) = self.forward_branches(text, text_mask, image_a, image_b)?;
        let cls_a = a.narrow(1, 0, 1)?.squeeze(1)?;
        let cls_b = b.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(self
            .merge
            .forward(&Tensor::cat(&[&cls_a, &cls_b], 1)?)?
            .relu()?)
    }
}
