use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub multimodal_layers: usize,
    pub vc_encoder_layers: usize,
    pub num_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Maximum number of visual concepts per image (k).
    pub max_concepts: usize,
    /// (vision layer, text layer) pairs aligned by the hierarchical contrastive
    /// loss, 0-based. The last entry must pair the final layers.
    pub aligned_layer_pairs: Vec<(usize, usize)>,
    #[serde(default = "default_mim_layers")]
    pub mim_decoder_layers: usize,
    #[serde(default = "default_mim_heads")]
    pub mim_decoder_heads: usize,
    /// One learned temperature per aligned pair instead of a shared one.
    #[serde(default)]
    pub per_layer_temperature: bool,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_mim_layers() -> usize {
    2
}
fn default_mim_heads() -> usize {
    4
}

/// Pairs vision layer `L_v - T + j` with text layer `j` for every text layer.
pub fn last_layers_pairing(vision_layers: usize, text_layers: usize) -> Vec<(usize, usize)> {
    let offset = vision_layers.saturating_sub(text_layers);
    (0..text_layers.min(vision_layers))
        .map(|j| (offset + j, j + text_layers.saturating_sub(vision_layers)))
        .collect()
}

impl ModelConfig {
    /// Laptop-sized model used for every training test.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            hidden_dim: 64,
            embed_dim: 32,
            vision_layers: 4,
            text_layers: 3,
            multimodal_layers: 3,
            vc_encoder_layers: 1,
            num_heads: 4,
            mlp_ratio: 4,
            vocab_size,
            max_text_len: 32,
            max_concepts: 15,
            aligned_layer_pairs: last_layers_pairing(4, 3),
            mim_decoder_layers: 2,
            mim_decoder_heads: 4,
            per_layer_temperature: false,
            seed: 0,
        }
    }

    /// ViT-B/16 + BERT-base sized configuration. Only used for shape checks.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            patch_size: 16,
            channels: 3,
            hidden_dim: 768,
            embed_dim: 256,
            vision_layers: 12,
            text_layers: 6,
            multimodal_layers: 6,
            vc_encoder_layers: 2,
            num_heads: 12,
            mlp_ratio: 4,
            vocab_size: 30522,
            max_text_len: 30,
            max_concepts: 15,
            aligned_layer_pairs: last_layers_pairing(12, 6),
            mim_decoder_layers: 2,
            mim_decoder_heads: 16,
            per_layer_temperature: false,
            seed: 0,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.mim_decoder_heads == 0 || self.hidden_dim % self.mim_decoder_heads != 0 {
            return fail(format!(
                "hidden_dim {} is not divisible by mim_decoder_heads {}",
                self.hidden_dim, self.mim_decoder_heads
            ));
        }
        if self.vision_layers == 0 || self.text_layers == 0 || self.multimodal_layers == 0 {
            return fail("encoders need at least one layer".into());
        }
        if self.vocab_size <= crate::tokenizer::NUM_SPECIALS as usize {
            return fail(format!(
                "vocab_size {} leaves no room for words",
                self.vocab_size
            ));
        }
        let Some(&last) = self.aligned_layer_pairs.last() else {
            return fail("aligned_layer_pairs is empty".into());
        };
        if last != (self.vision_layers - 1, self.text_layers - 1) {
            return fail(format!(
                "the last aligned pair must be the final layers ({}, {}), got {:?}",
                self.vision_layers - 1,
                self.text_layers - 1,
                last
            ));
        }
        for &(v, t) in &self.aligned_layer_pairs {
            if v >= self.vision_layers || t >= self.text_layers {
                return fail(format!("aligned pair ({v}, {t}) indexes a missing layer"));
            }
        }
        Ok(())
    }
}
