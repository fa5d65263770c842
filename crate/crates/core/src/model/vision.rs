use candle_core::Tensor;

use super::config::ModelConfig;
use super::layers::{EncoderBlock, Linear};
use super::params::Scope;
use super::sequence::{LayeredBatch, TokenKind};
use crate::ops::{device, DTYPE};
use crate::{Error, Result};

/// Concept tokens for a batch: [B, K, H] plus a [B, K] validity mask.
#[derive(Debug, Clone)]
pub struct ConceptTokens {
    pub tokens: Tensor,
    pub mask: Tensor,
}

impl ConceptTokens {
    /// Pads per-image concept tokens ([n_i, H] each) to a common length.
    pub fn pad(per_image: &[Tensor], hidden: usize) -> Result<Self> {
        let b = per_image.len();
        let k = per_image
            .iter()
            .map(|t| t.dim(0).unwrap_or(0))
            .max()
            .unwrap_or(0);
        let dev = device();
        let mut rows = Vec::with_capacity(b);
        let mut mask = Vec::with_capacity(b * k);
        for t in per_image {
            let n = t.dim(0)?;
            let padded = if n < k {
                let pad = Tensor::zeros((k - n, hidden), DTYPE, &dev)?;
                if n == 0 {
                    pad
                } else {
                    Tensor::cat(&[t, &pad], 0)?
                }
            } else {
                t.clone()
            };
            rows.push(padded);
            mask.extend((0..k).map(|i| if i < n { 1.0 } else { 0.0 }));
        }
        let tokens = if k == 0 {
            Tensor::zeros((b, 0, hidden), DTYPE, &dev)?
        } else {
            Tensor::stack(&rows, 0)?
        };
        Ok(Self {
            tokens,
            mask: Tensor::from_vec(mask, (b, k), &dev)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.dim(1).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits [B, C, H, W] images into [B, M, C*p*p] patches, row-major over the
/// grid, pixels ordered (channel, row, column) inside a patch.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape(vec![b, c, gh, patch, gw, patch])?
        .permute(vec![0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, gh * gw, c * patch * patch))?)
}

/// Fixed 2-D sine-cosine table, [1 + grid², dim]: the class row is zero, then
/// one row per patch in row-major order. Half the channels encode the row and
/// half the column.
pub fn sincos_positions(grid: usize, dim: usize) -> Result<Tensor> {
    let quarter = dim / 4;
    let mut data = vec![0.0; (1 + grid * grid) * dim];
    for r in 0..grid {
        for c in 0..grid {
            let row = &mut data[(1 + r * grid + c) * dim..][..dim];
            for (half, coord) in [(0, r), (1, c)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter.max(1) as f64);
                    let angle = coord as f64 * omega;
                    row[half * dim / 2 + i] = angle.sin();
                    row[half * dim / 2 + quarter + i] = angle.cos();
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (1 + grid * grid, dim), &device())?)
}

/// ViT encoder that accepts patch tokens followed by optional concept tokens.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub class_token: Tensor,
    pub position_embedding: Tensor,
    pub concept_type: Tensor,
    pub blocks: Vec<EncoderBlock>,
    pub config: ModelConfig,
}

impl VisionEncoder {
    pub fn new(scope: &Scope, config: &ModelConfig) -> Result<Self> {
        let h = config.hidden_dim;
        Ok(Self {
            patch_embed: Linear::new(&scope.pp("patch_embed"), config.patch_dim(), h)?,
            class_token: scope.normal(h, "class_token")?,
            position_embedding: scope.copy_of(
                &sincos_positions(config.grid_size(), h)?,
                "position_embedding",
            )?,
            concept_type: scope.normal(h, "concept_type")?,
            blocks: (0..config.vision_layers)
                .map(|i| {
                    EncoderBlock::new(
                        &scope.pp(format!("layers.{i}")),
                        h,
                        config.num_heads,
                        config.mlp_ratio,
                    )
                })
                .collect::<Result<_>>()?,
            config: config.clone(),
        })
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4().map_err(|_| {
            Error::Config(format!(
                "expected [B, C, H, W] images, got {:?}",
                images.shape()
            ))
        })?;
        let cfg = &self.config;
        if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::Config(format!(
                "image of shape {c}x{h}x{w} does not match config {}x{}x{}",
                cfg.channels, cfg.image_size, cfg.image_size
            )));
        }
        Ok(())
    }

    /// Class token followed by every patch token, with positions added:
    /// [B, 1 + M, H].
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let b = images.dim(0)?;
        let h = self.config.hidden_dim;
        let patches = self
            .patch_embed
            .forward(&patchify(images, self.config.patch_size)?)?;
        let cls = self
            .class_token
            .reshape((1, 1, h))?
            .broadcast_as((b, 1, h))?;
        let x = Tensor::cat(&[&cls, &patches], 1)?;
        Ok(x.broadcast_add(&self.position_embedding)?)
    }

    pub fn run_blocks(&self, mut x: Tensor, mask: Option<&Tensor>) -> Result<Vec<Tensor>> {
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(&x, mask)?;
            layers.push(x.clone());
        }
        Ok(layers)
    }

    /// Full forward: class, all patches, then concept tokens (if any).
    pub fn forward(
        &self,
        images: &Tensor,
        concepts: Option<&ConceptTokens>,
    ) -> Result<LayeredBatch> {
        let x = self.embed(images)?;
        let (b, base, _) = x.dims3()?;
        let m = base - 1;
        let mut kinds = vec![TokenKind::Class];
        kinds.extend(std::iter::repeat_n(TokenKind::Patch, m));
        let mut positions: Vec<Vec<usize>> = (0..b)
            .map(|_| std::iter::once(0).chain(0..m).collect())
            .collect();
        let (x, mask) = match concepts {
            Some(c) if !c.is_empty() => {
                let k = c.len();
                let typed = c.tokens.broadcast_add(&self.concept_type)?;
                kinds.extend(std::iter::repeat_n(TokenKind::Concept, k));
                for p in positions.iter_mut() {
                    p.extend(0..k);
                }
                let all_valid = c.mask.min_all()?.to_scalar::<f64>()? > 0.5;
                let mask = if all_valid {
                    None
                } else {
                    let ones = Tensor::ones((b, base), DTYPE, &device())?;
                    Some(Tensor::cat(&[&ones, &c.mask], 1)?)
                };
                (Tensor::cat(&[&x, &typed], 1)?, mask)
            }
            _ => (x, None),
        };
        let layers = self.run_blocks(x, mask.as_ref())?;
        Ok(LayeredBatch {
            layers,
            mask,
            kinds,
            positions,
        })
    }

    /// Concept-free forward over the class token and the visible patches only.
    /// Every sample must keep the same number of patches.
    pub fn forward_visible(&self, images: &Tensor, visible: &[Vec<usize>]) -> Result<LayeredBatch> {
        let b = images.dim(0)?;
        if visible.len() != b {
            return Err(Error::InvalidMask(format!(
                "{} visibility lists for a batch of {b}",
                visible.len()
            )));
        }
        let nv = visible.first().map(Vec::len).unwrap_or(0);
        let m = self.config.num_patches();
        for v in visible {
            if v.is_empty() {
                return Err(Error::InvalidMask("no visible patches".into()));
            }
            if v.len() != nv {
                return Err(Error::InvalidMask(
                    "visible counts differ across the batch".into(),
                ));
            }
            if v.iter().any(|&i| i >= m) {
                return Err(Error::InvalidMask(format!(
                    "patch index out of range 0..{m}"
                )));
            }
        }
        let full = self.embed(images)?;
        let dev = device();
        let rows = visible
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let idx: Vec<u32> = std::iter::once(0)
                    .chain(v.iter().map(|&p| p as u32 + 1))
                    .collect();
                let idx = Tensor::from_vec(idx, nv + 1, &dev)?;
                full.get(i)?.index_select(&idx, 0)
            })
            .collect::<candle_core::Result<Vec<_>>>()?;
        let x = Tensor::stack(&rows, 0)?;
        let layers = self.run_blocks(x, None)?;
        let mut kinds = vec![TokenKind::Class];
        kinds.extend(std::iter::repeat_n(TokenKind::Patch, nv));
        Ok(LayeredBatch {
            layers,
            mask: None,
            kinds,
            positions: visible
                .iter()
                .map(|v| std::iter::once(0).chain(v.iter().copied()).collect())
                .collect(),
        })
    }
}
