//! One pretraining step over all four objectives.

use candle_core::Tensor;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointState};
use super::config::RunConfig;
use super::optim::{clip_grad_norm, learning_rate, AdamW};
use crate::concepts::vca_sample;
use crate::data::{Batch, Batcher, ImageTensor};
use crate::downstream::retrieval_eval;
use crate::model::{patchify, VichaModel};
use crate::objectives::{
    combine_losses, hitc_loss, itm_loss, m_mim_loss, mine_hard_negatives, mlm_loss,
    plan_image_mask, plan_mlm_mask, u_mim_loss, LossBundle, MimVariant, DEFAULT_ACTION_PROBS,
};
use crate::ops::scalar;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub itm: f64,
    pub mlm: f64,
    pub hitc: f64,
    pub mim: f64,
    pub total: f64,
    pub tau: f64,
    pub lr: f64,
}

impl StepRecord {
    fn new(step: u64, b: &LossBundle, tau: f64, lr: f64) -> Self {
        Self {
            step,
            itm: b.itm,
            mlm: b.mlm,
            hitc: b.hitc,
            mim: b.mim,
            total: b.total,
            tau,
            lr,
        }
    }
}

/// The four losses of one batch as graph tensors, plus their scalar values.
pub struct StepLosses {
    pub total: Tensor,
    pub bundle: LossBundle,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: VichaModel,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub batcher: Batcher,
}

impl Trainer {
    /// Fresh model initialised from `config.model.seed`; sampling uses
    /// `config.seed`.
    pub fn new(config: RunConfig, tokenizer: Tokenizer, batcher: Batcher) -> Result<Self> {
        config.validate()?;
        let t = &config.training;
        let model = VichaModel::new(config.model.clone(), tokenizer, t.tau_init, t.queue_size)?;
        Ok(Self {
            optimizer: AdamW::new(t.weight_decay),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            step: 0,
            model,
            config,
            batcher,
        })
    }

    /// Adopts a loaded checkpoint. The step budget of the current config is
    /// kept so a resumed run can be extended.
    pub fn restore(&mut self, state: CheckpointState) {
        let steps = self.config.training.steps;
        self.config = state.config;
        self.config.training.steps = steps;
        self.model = state.model;
        self.optimizer = state.optimizer;
        self.step = state.step;
        self.rng = state.rng;
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.config,
            &self.model,
            &self.optimizer,
            self.step,
            &self.rng,
        )
    }

    pub fn current_lr(&self) -> f64 {
        let t = &self.config.training;
        learning_rate(
            t.schedule,
            t.learning_rate,
            t.warmup_steps,
            t.steps,
            self.step,
        )
    }

    fn batch_images(&mut self, batch: &Batch) -> Result<Tensor> {
        let crop = self.config.training.random_crop;
        let tensors = batch
            .images
            .iter()
            .map(|img| {
                if crop {
                    img.random_crop(0.5, &mut self.rng).to_tensor()
                } else {
                    img.to_tensor()
                }
            })
            .collect::<Result<Vec<_>>>()?;
        VichaModel::stack_images(&tensors)
    }

    fn augmented_concepts(&mut self, batch: &Batch) -> Result<Option<Vec<Vec<String>>>> {
        let t = &self.config.training;
        if !t.use_concepts {
            return Ok(None);
        }
        let (k, p_vc) = (t.k, t.p_vc);
        batch
            .concepts
            .iter()
            .map(|set| Ok(vca_sample(&set.truncated(k), p_vc, &mut self.rng)?.concepts))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Runs every forward pass of one step and returns the weighted total.
    /// Pushes the batch's momentum features into the queues.
    pub fn forward_losses(&mut self, batch: &Batch) -> Result<StepLosses> {
        let images = self.batch_images(batch)?;
        let concepts = self.augmented_concepts(batch)?;
        let training = self.config.training.clone();
        let model = &mut self.model;
        let b = batch.len();

        let vision = model.encode_images(&model.online, &images, concepts.as_deref())?;
        let text = model.online.text.forward(&batch.token_ids)?;
        let momentum_vision = model.encode_images(&model.momentum, &images, concepts.as_deref())?;
        let momentum_text = model.momentum.text.forward(&batch.token_ids)?;

        let vision_cls = (0..vision.layers.len())
            .map(|l| vision.class_tokens(l))
            .collect::<Result<Vec<_>>>()?;
        let text_cls = (0..text.layers.len())
            .map(|l| text.class_tokens(l))
            .collect::<Result<Vec<_>>>()?;
        let hitc = hitc_loss(
            &mut model.hitc,
            &vision_cls,
            &text_cls,
            &momentum_vision
                .class_tokens(momentum_vision.layers.len() - 1)?
                .detach(),
            &momentum_text
                .class_tokens(momentum_text.layers.len() - 1)?
                .detach(),
        )?;

        let itm = if b >= 2 {
            let sim = hitc
                .image_features
                .matmul(&hitc.text_features.t()?)?
                .to_vec2::<f64>()?;
            let sim = Array2::from_shape_fn((b, b), |(i, j)| sim[i][j]);
            let negatives = mine_hard_negatives(&sim, &mut self.rng)?;
            let all: Vec<usize> = (0..b).collect();
            let text_idx = [&all[..], &all[..], &negatives.text_for_image[..]].concat();
            let image_idx = [&all[..], &negatives.image_for_text[..], &all[..]].concat();
            let logits = model.itm_logits(&text.select(&text_idx)?, &vision.select(&image_idx)?)?;
            itm_loss(&logits.narrow(0, 0, b)?, &logits.narrow(0, b, 2 * b)?)?
        } else {
            log::warn!("batch of {b} has no in-batch negatives; ITM skipped");
            Tensor::zeros((), crate::ops::DTYPE, &crate::ops::device())?
        };

        let tokenizer = &model.tokenizer;
        let vocab = tokenizer.vocab_size();
        let mut plans = Vec::with_capacity(b);
        let mut corrupted = Vec::with_capacity(b);
        for ids in &batch.token_ids {
            let (plan, c) = plan_mlm_mask(
                ids,
                Tokenizer::is_special,
                training.mlm_ratio,
                DEFAULT_ACTION_PROBS,
                vocab,
                &mut self.rng,
            )?;
            plans.push(plan);
            corrupted.push(c);
        }
        let masked_text = model.online.text.forward(&corrupted)?;
        let decoded = model.multimodal.forward(
            masked_text.last(),
            masked_text.mask.as_ref(),
            vision.last(),
            vision.mask.as_ref(),
            None,
        )?;
        let mlm = mlm_loss(&model.mlm_head.forward(&decoded)?, &plans, &batch.token_ids)?;

        let patches = model.config.num_patches();
        let mask_plans = (0..b)
            .map(|_| plan_image_mask(patches, training.mim_ratio, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let visible: Vec<Vec<usize>> = mask_plans.iter().map(|p| p.visible.clone()).collect();
        let encoded = model.online.vision.forward_visible(&images, &visible)?;
        let targets = patchify(&images, model.config.patch_size)?;
        let mim = match training.mim_variant {
            MimVariant::U => u_mim_loss(&model.mim, encoded.last(), &mask_plans, &targets)?,
            MimVariant::M => m_mim_loss(
                &model.mim,
                encoded.last(),
                &mask_plans,
                &model.multimodal,
                text.last(),
                text.mask.as_ref(),
                &targets,
            )?,
        };

        let bundle = combine_losses(
            scalar(&itm)?,
            scalar(&mlm)?,
            scalar(&hitc.loss)?,
            scalar(&mim)?,
            training.lambda_hitc,
            training.lambda_mim,
        )?;
        let total =
            (((itm + mlm)? + (hitc.loss * training.lambda_hitc)?)? + (mim * training.lambda_mim)?)?;
        Ok(StepLosses { total, bundle })
    }

    /// Forward, backward, clipped AdamW update and momentum update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.batcher.batch_at(self.step);
        let losses = self.forward_losses(&batch)?;
        if !losses.bundle.total.is_finite() {
            return Err(Error::NonFinite {
                loss: "total",
                value: losses.bundle.total,
            });
        }
        let mut grads = losses.total.backward()?;
        let params = self.model.params.vars();
        clip_grad_norm(&params, &mut grads, self.config.training.grad_clip)?;
        let lr = self.current_lr();
        self.optimizer.step(&params, &grads, lr)?;
        self.model.update_momentum(self.config.training.momentum)?;
        self.step += 1;
        Ok(StepRecord::new(
            self.step,
            &losses.bundle,
            self.model.hitc.temperature_value()?,
            lr,
        ))
    }

    /// Encodes and scores every pair in manifest order without updating
    /// anything; concepts are used without augmentation.
    pub fn eval_concepts(&self) -> Option<Vec<Vec<String>>> {
        let t = &self.config.training;
        t.use_concepts.then(|| {
            self.batcher
                .all()
                .concepts
                .iter()
                .map(|c| c.truncated(t.k).concepts)
                .collect()
        })
    }

    pub fn eval_images(&self) -> Vec<ImageTensor> {
        self.batcher.all().images
    }

    /// Two-stage R@1 within each batch of the epoch holding the last
    /// completed step, reranking the whole batch. Returns the mean over
    /// batches of the text-to-image and image-to-text averages.
    pub fn in_batch_recall(&self, m: usize) -> Result<f64> {
        let k = self.config.training.k;
        let epoch = self.step.saturating_sub(1) / self.batcher.batches_per_epoch() as u64;
        let t = &self.config.training;
        let batches = self.batcher.epoch(epoch);
        let mut total = 0.0;
        for batch in &batches {
            let concepts: Option<Vec<Vec<String>>> = t.use_concepts.then(|| {
                batch
                    .concepts
                    .iter()
                    .map(|c| c.truncated(k).concepts)
                    .collect()
            });
            let r = retrieval_eval(
                &self.model,
                &batch.images,
                concepts.as_deref(),
                &batch.token_ids,
                m,
            )?;
            total += (r.text_to_image[&1] + r.image_to_text[&1]) / 2.0;
        }
        Ok(total / batches.len() as f64)
    }
}
