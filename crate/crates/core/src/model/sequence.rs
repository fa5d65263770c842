use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Class,
    Patch,
    Concept,
    Text,
    Mask,
}

/// One embedded sequence: `tokens` is [length, hidden_dim] and every row
/// carries its kind and source index (patch grid index, concept index or
/// text position; 0 for the class token).
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub kinds: Vec<TokenKind>,
    pub positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// Checks the layout rules shared by every encoder output.
    pub fn check_layout(&self) -> Result<()> {
        if self.kinds.len() != self.positions.len() || self.tokens.dim(0)? != self.kinds.len() {
            return Err(Error::Config(
                "token sequence fields disagree in length".into(),
            ));
        }
        let classes = self
            .kinds
            .iter()
            .filter(|k| **k == TokenKind::Class)
            .count();
        if classes > 0 && (classes != 1 || self.kinds[0] != TokenKind::Class) {
            return Err(Error::Config(
                "class token must appear once, at index 0".into(),
            ));
        }
        if let Some(first_concept) = self.kinds.iter().position(|k| *k == TokenKind::Concept) {
            if self.kinds[first_concept..].contains(&TokenKind::Patch) {
                return Err(Error::Config(
                    "concept tokens must follow all patch tokens".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Per-layer outputs of an encoder for a batch whose samples share one
/// token layout.
#[derive(Debug, Clone)]
pub struct LayeredBatch {
    /// One [B, L, H] tensor per layer.
    pub layers: Vec<Tensor>,
    /// [B, L] validity mask, `None` when nothing is padded.
    pub mask: Option<Tensor>,
    pub kinds: Vec<TokenKind>,
    /// Per-sample source indices, each of length L.
    pub positions: Vec<Vec<usize>>,
}

impl LayeredBatch {
    pub fn last(&self) -> &Tensor {
        self.layers
            .last()
            .expect("encoders have at least one layer")
    }

    /// Class token of `layer` for every sample, [B, H].
    pub fn class_tokens(&self, layer: usize) -> Result<Tensor> {
        Ok(self.layers[layer].narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// Same batch cut off from the autograd graph.
    pub fn detach(&self) -> LayeredBatch {
        LayeredBatch {
            layers: self.layers.iter().map(Tensor::detach).collect(),
            ..self.clone()
        }
    }

    /// Selects rows of the batch (with repetition), keeping the layout.
    pub fn select(&self, index: &[usize]) -> Result<LayeredBatch> {
        let idx = Tensor::from_vec(
            index.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            index.len(),
            &crate::ops::device(),
        )?;
        Ok(LayeredBatch {
            layers: self
                .layers
                .iter()
                .map(|l| l.index_select(&idx, 0))
                .collect::<candle_core::Result<_>>()?,
            mask: self
                .mask
                .as_ref()
                .map(|m| m.index_select(&idx, 0))
                .transpose()?,
            kinds: self.kinds.clone(),
            positions: index.iter().map(|&i| self.positions[i].clone()).collect(),
        })
    }

    /// Splits sample `b` into one [`TokenSequence`] per layer, dropping padding.
    pub fn sample(&self, b: usize) -> Result<Vec<TokenSequence>> {
        let valid: Vec<usize> = match &self.mask {
            Some(m) => m
                .get(b)?
                .to_vec1::<f64>()?
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.5)
                .map(|(i, _)| i)
                .collect(),
            None => (0..self.kinds.len()).collect(),
        };
        let idx = Tensor::from_vec(
            valid.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            valid.len(),
            &crate::ops::device(),
        )?;
        self.layers
            .iter()
            .map(|l| {
                Ok(TokenSequence {
                    tokens: l.get(b)?.index_select(&idx, 0)?,
                    kinds: valid.iter().map(|&i| self.kinds[i]).collect(),
                    positions: valid.iter().map(|&i| self.positions[b][i]).collect(),
                })
            })
            .collect()
    }
}
