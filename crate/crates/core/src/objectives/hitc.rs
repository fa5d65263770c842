//! Hierarchical image-text contrastive loss.
//!
//! Every aligned (vision layer, text layer) pair has its own projection heads.
//! The last pair contrasts online features against momentum features of the
//! batch plus two FIFO queues of past momentum features; earlier pairs use
//! in-batch online features only. Targets are one-hot; the loss is the
//! cross-entropy of both directions summed over all pairs.

use std::collections::VecDeque;

use candle_core::Tensor;

use crate::model::config::ModelConfig;
use crate::model::layers::Linear;
use crate::model::params::Scope;
use crate::ops::{cross_entropy, device, l2_normalize, scalar, softmax_last, DTYPE};
use crate::{Error, Result};

/// Bounded FIFO of unit-norm feature rows.
#[derive(Debug, Clone)]
pub struct FeatureQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl FeatureQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Oldest first.
    pub fn rows(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.rows.iter()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Config(format!(
                "queue row of width {} for a queue of width {}",
                row.len(),
                self.dim
            )));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
        Ok(())
    }

    /// Pushes every row of a [B, D] tensor, in row order.
    pub fn push(&mut self, features: &Tensor) -> Result<()> {
        for row in features.to_vec2::<f64>()? {
            self.push_row(row)?;
        }
        Ok(())
    }

    /// Queue contents as a [len, D] tensor, `None` when empty.
    pub fn to_tensor(&self) -> Result<Option<Tensor>> {
        if self.rows.is_empty() {
            return Ok(None);
        }
        let flat: Vec<f64> = self.rows.iter().flatten().copied().collect();
        Ok(Some(Tensor::from_vec(
            flat,
            (self.rows.len(), self.dim),
            &device(),
        )?))
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }
}

#[derive(Debug, Clone)]
pub struct HitcState {
    pub pairs: Vec<(usize, usize)>,
    pub vision_proj: Vec<Linear>,
    pub text_proj: Vec<Linear>,
    pub momentum_vision_proj: Vec<Linear>,
    pub momentum_text_proj: Vec<Linear>,
    /// log τ, one entry shared by all pairs or one per pair.
    pub log_temperature: Tensor,
    pub image_queue: FeatureQueue,
    pub text_queue: FeatureQueue,
}

/// Result of one loss evaluation.
#[derive(Debug, Clone)]
pub struct HitcOutput {
    pub loss: Tensor,
    /// Unweighted loss of each aligned pair (both directions summed).
    pub per_pair: Vec<f64>,
    /// Detached image-to-text and text-to-image probabilities per pair.
    pub probabilities: Vec<(Tensor, Tensor)>,
    /// Normalised online features of the last pair, detached, [B, E].
    pub image_features: Tensor,
    pub text_features: Tensor,
    pub degenerate: bool,
}

impl HitcState {
    /// `online` and `momentum` are scopes in the two parameter stores; the
    /// momentum heads get the same names as the online heads.
    pub fn new(
        online: &Scope,
        momentum: &Scope,
        config: &ModelConfig,
        tau_init: f64,
        queue_capacity: usize,
    ) -> Result<Self> {
        if tau_init <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {tau_init}"
            )));
        }
        let (h, e) = (config.hidden_dim, config.embed_dim);
        let n = config.aligned_layer_pairs.len();
        let heads = |s: &Scope, kind: &str| -> Result<Vec<Linear>> {
            (0..n)
                .map(|i| Linear::new(&s.pp(format!("{kind}.{i}")), h, e))
                .collect()
        };
        let vision_proj = heads(online, "vision_proj")?;
        let text_proj = heads(online, "text_proj")?;
        let momentum_vision_proj = heads(momentum, "vision_proj")?;
        let momentum_text_proj = heads(momentum, "text_proj")?;
        let temps = if config.per_layer_temperature { n } else { 1 };
        let log_temperature = online.constant(temps, tau_init.ln(), "log_temperature")?;
        Ok(Self {
            pairs: config.aligned_layer_pairs.clone(),
            vision_proj,
            text_proj,
            momentum_vision_proj,
            momentum_text_proj,
            log_temperature,
            image_queue: FeatureQueue::new(queue_capacity, e),
            text_queue: FeatureQueue::new(queue_capacity, e),
        })
    }

    /// τ of aligned pair `pair` as a differentiable scalar.
    pub fn temperature(&self, pair: usize) -> Result<Tensor> {
        let idx = if self.log_temperature.dim(0)? == 1 {
            0
        } else {
            pair
        };
        Ok(self.log_temperature.get(idx)?.exp()?)
    }

    pub fn temperature_value(&self) -> Result<f64> {
        scalar(&self.temperature(0)?)
    }

    pub fn last_pair(&self) -> usize {
        self.pairs.len() - 1
    }

    /// Normalised online projections of the last pair.
    pub fn project_last(&self, vision_cls: &Tensor, text_cls: &Tensor) -> Result<(Tensor, Tensor)> {
        let last = self.last_pair();
        Ok((
            l2_normalize(&self.vision_proj[last].forward(vision_cls)?)?,
            l2_normalize(&self.text_proj[last].forward(text_cls)?)?,
        ))
    }

    /// Normalised momentum projections of the last pair, detached.
    pub fn project_momentum(
        &self,
        vision_cls: &Tensor,
        text_cls: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let last = self.last_pair();
        Ok((
            l2_normalize(&self.momentum_vision_proj[last].forward(&vision_cls.detach())?)?.detach(),
            l2_normalize(&self.momentum_text_proj[last].forward(&text_cls.detach())?)?.detach(),
        ))
    }
}

/// Computes the loss, then enqueues the batch's momentum features.
///
/// `vision_cls[l]` / `text_cls[l]` are the online [B, H] class tokens of
/// encoder layer `l`; `momentum_*_cls` are the momentum encoders' last-layer
/// class tokens. Sample `i` of both modalities forms the positive pair.
pub fn hitc_loss(
    state: &mut HitcState,
    vision_cls: &[Tensor],
    text_cls: &[Tensor],
    momentum_vision_cls: &Tensor,
    momentum_text_cls: &Tensor,
) -> Result<HitcOutput> {
    let b = momentum_vision_cls.dim(0)?;
    let targets: Vec<u32> = (0..b as u32).collect();
    let last = state.last_pair();
    let (mom_img, mom_txt) = state.project_momentum(momentum_vision_cls, momentum_text_cls)?;
    let degenerate = b < 2 && state.image_queue.is_empty();
    if degenerate {
        log::warn!("contrastive loss with batch {b} and empty queues has no negatives");
    }

    let mut total = Tensor::zeros((), DTYPE, &device())?;
    let mut per_pair = Vec::with_capacity(state.pairs.len());
    let mut probabilities = Vec::with_capacity(state.pairs.len());
    let mut last_features = None;
    for (i, &(vl, tl)) in state.pairs.iter().enumerate() {
        let vcls = vision_cls
            .get(vl)
            .ok_or_else(|| Error::Config(format!("no class token for vision layer {vl}")))?;
        let tcls = text_cls
            .get(tl)
            .ok_or_else(|| Error::Config(format!("no class token for text layer {tl}")))?;
        let img = l2_normalize(&state.vision_proj[i].forward(vcls)?)?;
        let txt = l2_normalize(&state.text_proj[i].forward(tcls)?)?;
        let tau = state.temperature(i)?;
        let (text_bank, image_bank) = if i == last {
            let with_queue = |batch: &Tensor, q: &FeatureQueue| -> Result<Tensor> {
                Ok(match q.to_tensor()? {
                    Some(queued) => Tensor::cat(&[batch, &queued], 0)?,
                    None => batch.clone(),
                })
            };
            (
                with_queue(&mom_txt, &state.text_queue)?,
                with_queue(&mom_img, &state.image_queue)?,
            )
        } else {
            (txt.clone(), img.clone())
        };
        let logits_i2t = img.matmul(&text_bank.t()?)?.broadcast_div(&tau)?;
        let logits_t2i = txt.matmul(&image_bank.t()?)?.broadcast_div(&tau)?;
        let loss = (cross_entropy(&logits_i2t, &targets)? + cross_entropy(&logits_t2i, &targets)?)?;
        per_pair.push(scalar(&loss)?);
        probabilities.push((
            softmax_last(&logits_i2t.detach())?,
            softmax_last(&logits_t2i.detach())?,
        ));
        total = (total + loss)?;
        if i == last {
            last_features = Some((img.detach(), txt.detach()));
        }
    }

    state.image_queue.push(&mom_img)?;
    state.text_queue.push(&mom_txt)?;

    let (image_features, text_features) = last_features.expect("at least one aligned pair");
    Ok(HitcOutput {
        loss: total,
        per_pair,
        probabilities,
        image_features,
        text_features,
        degenerate,
    })
}
