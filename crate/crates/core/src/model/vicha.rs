//! The full pretraining model: online encoders, their momentum twins, the
//! shared multimodal decoder and every objective head.

use candle_core::Tensor;

use super::config::ModelConfig;
use super::multimodal::{replicate_multimodal_for_pair, MultimodalDecoder, PairedDecoder};
use super::params::{momentum_update, MomentumPair, ParamStore};
use super::sequence::{LayeredBatch, TokenKind, TokenSequence};
use super::text::TextEncoder;
use super::vision::{ConceptTokens, VisionEncoder};
use crate::objectives::{HitcState, ItmHead, MimHead, MlmHead};
use crate::ops::{device, DTYPE};
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

/// The vision, concept and text encoders of one parameter set.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub vision: VisionEncoder,
    pub concepts: TextEncoder,
    pub text: TextEncoder,
}

impl Encoders {
    fn new(scope: &super::params::Scope, config: &ModelConfig) -> Result<Self> {
        let h = config.hidden_dim;
        Ok(Self {
            vision: VisionEncoder::new(&scope.pp("vision"), config)?,
            concepts: TextEncoder::new(
                &scope.pp("concept_encoder"),
                config.vocab_size,
                config.max_text_len,
                h,
                config.vc_encoder_layers,
                config.num_heads,
                config.mlp_ratio,
            )?,
            text: TextEncoder::new(
                &scope.pp("text"),
                config.vocab_size,
                config.max_text_len,
                h,
                config.text_layers,
                config.num_heads,
                config.mlp_ratio,
            )?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VichaModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
    pub momentum_params: ParamStore,
    pub online: Encoders,
    pub momentum: Encoders,
    pub multimodal: MultimodalDecoder,
    pub itm_head: ItmHead,
    pub mlm_head: MlmHead,
    pub mim: MimHead,
    pub hitc: HitcState,
    /// Two-image decoder, present after [`VichaModel::replicate_for_pair`].
    pub paired: Option<PairedDecoder>,
}

impl VichaModel {
    pub fn new(
        config: ModelConfig,
        tokenizer: Tokenizer,
        tau_init: f64,
        queue_capacity: usize,
    ) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "config vocab_size {} but tokenizer has {} tokens",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let params = ParamStore::new(config.seed);
        let momentum_params = ParamStore::new(config.seed ^ 0x6d6f_6d65);
        let root = params.root();
        let mroot = momentum_params.root();
        let online = Encoders::new(&root, &config)?;
        let momentum = Encoders::new(&mroot, &config)?;
        let multimodal = MultimodalDecoder::new(&root.pp("multimodal"), &config)?;
        let itm_head = ItmHead::new(&root.pp("itm_head"), config.hidden_dim)?;
        let mlm_head = MlmHead::new(&root.pp("mlm_head"), config.hidden_dim, config.vocab_size)?;
        let mim = MimHead::new(&root.pp("mim"), &config)?;
        let hitc = HitcState::new(
            &root.pp("hitc"),
            &mroot.pp("hitc"),
            &config,
            tau_init,
            queue_capacity,
        )?;
        momentum_params.copy_from(&params)?;
        Ok(Self {
            config,
            tokenizer,
            params,
            momentum_params,
            online,
            momentum,
            multimodal,
            itm_head,
            mlm_head,
            mim,
            hitc,
            paired: None,
        })
    }

    /// Replicates the multimodal decoder for two-image tasks. Idempotent.
    pub fn replicate_for_pair(&mut self) -> Result<()> {
        if self.paired.is_none() {
            self.paired = Some(replicate_multimodal_for_pair(
                &self.multimodal,
                &self.params.root().pp("paired"),
            )?);
        }
        Ok(())
    }

    pub fn momentum_pair(&self, coefficient: f64) -> Result<MomentumPair> {
        MomentumPair::new(
            self.params.clone(),
            self.momentum_params.clone(),
            coefficient,
        )
    }

    pub fn update_momentum(&self, coefficient: f64) -> Result<()> {
        momentum_update(&self.momentum_pair(coefficient)?)
    }

    fn concept_ids(&self, concepts: &[String]) -> Result<Vec<Vec<u32>>> {
        if concepts.len() > self.config.max_concepts {
            return Err(Error::Config(format!(
                "{} concepts exceed max_concepts {}",
                concepts.len(),
                self.config.max_concepts
            )));
        }
        Ok(concepts.iter().map(|c| self.tokenizer.encode(c)).collect())
    }

    /// Encodes every concept of every image through `encoders.concepts` and
    /// returns one padded block of concept tokens (class token of each
    /// concept's encoding). `None` when no image has concepts.
    pub fn concept_tokens(
        &self,
        encoders: &Encoders,
        per_image: &[Vec<String>],
    ) -> Result<Option<ConceptTokens>> {
        let ids: Vec<Vec<Vec<u32>>> = per_image
            .iter()
            .map(|c| self.concept_ids(c))
            .collect::<Result<_>>()?;
        let flat: Vec<Vec<u32>> = ids.iter().flatten().cloned().collect();
        if flat.is_empty() {
            return Ok(None);
        }
        let encoded = encoders
            .concepts
            .forward(&flat)?
            .class_tokens(self.config.vc_encoder_layers - 1)?;
        let mut offset = 0;
        let per: Vec<Tensor> = ids
            .iter()
            .map(|c| {
                let t = encoded.narrow(0, offset, c.len());
                offset += c.len();
                t
            })
            .collect::<candle_core::Result<_>>()?;
        Ok(Some(ConceptTokens::pad(&per, self.config.hidden_dim)?))
    }

    /// Stacks [C, H, W] images into a batch.
    pub fn stack_images(images: &[Tensor]) -> Result<Tensor> {
        Ok(Tensor::stack(images, 0)?)
    }

    /// Full vision forward for a batch with optional concept lists.
    pub fn encode_images(
        &self,
        encoders: &Encoders,
        images: &Tensor,
        concepts: Option<&[Vec<String>]>,
    ) -> Result<LayeredBatch> {
        let tokens = match concepts {
            Some(c) => self.concept_tokens(encoders, c)?,
            None => None,
        };
        encoders.vision.forward(images, tokens.as_ref())
    }

    /// Single image through the online vision encoder. With `visible_mask`
    /// only the class token and the visible patches are encoded; concept
    /// tokens are not allowed in that mode.
    pub fn encode_image(
        &self,
        image: &Tensor,
        concept_tokens: Option<&TokenSequence>,
        visible_mask: Option<&[bool]>,
    ) -> Result<Vec<TokenSequence>> {
        let images = image.unsqueeze(0)?;
        let out = match visible_mask {
            Some(mask) => {
                if concept_tokens.is_some() {
                    return Err(Error::Config(
                        "masked image encoding does not take concept tokens".into(),
                    ));
                }
                if mask.len() != self.config.num_patches() {
                    return Err(Error::Config(format!(
                        "visible mask over {} patches, expected {}",
                        mask.len(),
                        self.config.num_patches()
                    )));
                }
                let visible: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                self.online.vision.forward_visible(&images, &[visible])?
            }
            None => {
                let tokens = match concept_tokens {
                    Some(seq) if !seq.is_empty() => {
                        let k = seq.len();
                        Some(ConceptTokens {
                            tokens: seq.tokens.unsqueeze(0)?,
                            mask: Tensor::ones((1, k), DTYPE, &device())?,
                        })
                    }
                    _ => None,
                };
                self.online.vision.forward(&images, tokens.as_ref())?
            }
        };
        out.sample(0)
    }

    /// Caption ids (without `[CLS]`) through the online text encoder.
    pub fn encode_text(&self, ids: &[u32]) -> Result<Vec<TokenSequence>> {
        self.online.text.forward(&[ids.to_vec()])?.sample(0)
    }

    /// One concept token per string: the class-token output of encoding the
    /// concept on its own.
    pub fn encode_concepts(&self, concepts: &[String]) -> Result<TokenSequence> {
        let n = concepts.len();
        let tokens = match self.concept_tokens(&self.online, &[concepts.to_vec()])? {
            Some(t) => t.tokens.squeeze(0)?,
            None => Tensor::zeros((0, self.config.hidden_dim), DTYPE, &device())?,
        };
        Ok(TokenSequence {
            tokens,
            kinds: vec![TokenKind::Concept; n],
            positions: (0..n).collect(),
        })
    }

    /// Multimodal decoding of one query sequence over one key/value sequence.
    pub fn multimodal_decode(
        &self,
        queries: &TokenSequence,
        keys_values: &TokenSequence,
    ) -> Result<TokenSequence> {
        let out = self.multimodal.forward(
            &queries.tokens.unsqueeze(0)?,
            None,
            &keys_values.tokens.unsqueeze(0)?,
            None,
            None,
        )?;
        Ok(TokenSequence {
            tokens: out.squeeze(0)?,
            kinds: queries.kinds.clone(),
            positions: queries.positions.clone(),
        })
    }

    /// ITM logits [B, 2] for text queries over image keys.
    pub fn itm_logits(&self, text: &LayeredBatch, image: &LayeredBatch) -> Result<Tensor> {
        let out = self.multimodal.forward(
            text.last(),
            text.mask.as_ref(),
            image.last(),
            image.mask.as_ref(),
            None,
        )?;
        self.itm_head.forward(&out.narrow(1, 0, 1)?.squeeze(1)?)
    }
}
