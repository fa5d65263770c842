use candle_core::Tensor;

use super::layers::{EncoderBlock, LayerNorm};
use super::params::Scope;
use super::sequence::{LayeredBatch, TokenKind};
use crate::ops::{device, DTYPE};
use crate::tokenizer::{CLS_ID, PAD_ID};
use crate::{Error, Result};

/// BERT-style text encoder. A `[CLS]` token is prepended to every input.
/// Also used, with its own weights, as the visual-concept encoder.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_norm: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new(
        scope: &Scope,
        vocab_size: usize,
        max_len: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        Ok(Self {
            token_embedding: scope.normal((vocab_size, hidden), "token_embedding")?,
            position_embedding: scope.normal((max_len + 1, hidden), "position_embedding")?,
            embed_norm: LayerNorm::new(&scope.pp("embed_norm"), hidden)?,
            blocks: (0..layers)
                .map(|i| {
                    EncoderBlock::new(&scope.pp(format!("layers.{i}")), hidden, heads, mlp_ratio)
                })
                .collect::<Result<_>>()?,
            vocab_size,
            max_len,
        })
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.max_len {
            return Err(Error::TextTooLong {
                len: ids.len(),
                max: self.max_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(Error::Tokenization {
                id,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Encodes a batch of captions (ids without `[CLS]`). Shorter inputs are
    /// right-padded; the returned mask marks valid rows.
    pub fn forward(&self, batch: &[Vec<u32>]) -> Result<LayeredBatch> {
        for ids in batch {
            self.check_ids(ids)?;
        }
        let b = batch.len();
        let len = 1 + batch.iter().map(Vec::len).max().unwrap_or(0);
        let mut flat = Vec::with_capacity(b * len);
        let mut mask = Vec::with_capacity(b * len);
        for ids in batch {
            flat.push(CLS_ID);
            flat.extend_from_slice(ids);
            flat.extend(std::iter::repeat_n(PAD_ID, len - 1 - ids.len()));
            mask.push(1.0);
            mask.extend(std::iter::repeat_n(1.0, ids.len()));
            mask.extend(std::iter::repeat_n(0.0, len - 1 - ids.len()));
        }
        let padded = batch.iter().any(|ids| ids.len() + 1 != len);
        let dev = device();
        let idx = Tensor::from_vec(flat, b * len, &dev)?;
        let hidden = self.token_embedding.dim(1)?;
        let tokens = self
            .token_embedding
            .index_select(&idx, 0)?
            .reshape((b, len, hidden))?;
        let pos = self.position_embedding.narrow(0, 0, len)?;
        let mut x = self.embed_norm.forward(&tokens.broadcast_add(&pos)?)?;
        let mask = if padded {
            Some(Tensor::from_vec(mask, (b, len), &dev)?.to_dtype(DTYPE)?)
        } else {
            None
        };
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(&x, mask.as_ref())?;
            layers.push(x.clone());
        }
        let mut kinds = vec![TokenKind::Text; len];
        kinds[0] = TokenKind::Class;
        let positions = (0..b).map(|_| (0..len).collect()).collect();
        Ok(LayeredBatch {
            layers,
            mask,
            kinds,
            positions,
        })
    }
}
