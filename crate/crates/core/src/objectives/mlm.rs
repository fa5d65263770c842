//! BERT-style masked language modelling.

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::layers::Linear;
use crate::model::params::Scope;
use crate::ops::{cross_entropy, device, DTYPE};
use crate::tokenizer::{MASK_ID, NUM_SPECIALS};
use crate::{Error, Result};

pub const DEFAULT_MASK_RATIO: f64 = 0.15;
/// Probabilities of replacing a selected token by `[MASK]`, by a random
/// token, or keeping it.
pub const DEFAULT_ACTION_PROBS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    MaskToken,
    RandomToken,
    Keep,
}

/// Positions (indices into the caption ids) selected for prediction and the
/// corruption applied to each.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Selects `round(ratio * maskable)` non-special positions uniformly without
/// replacement and corrupts each one according to `action_probs`.
pub fn plan_mlm_mask<R: Rng + ?Sized>(
    ids: &[u32],
    is_special: impl Fn(u32) -> bool,
    ratio: f64,
    action_probs: [f64; 3],
    vocab_size: usize,
    rng: &mut R,
) -> Result<(MaskPlan, Vec<u32>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if action_probs.iter().any(|p| *p < 0.0)
        || (action_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "action probabilities {action_probs:?} do not sum to 1"
        )));
    }
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !is_special(ids[i])).collect();
    let count = (ratio * maskable.len() as f64).round() as usize;
    let mut positions: Vec<usize> = rand::seq::index::sample(rng, maskable.len(), count)
        .into_iter()
        .map(|k| maskable[k])
        .collect();
    positions.sort_unstable();
    let mut corrupted = ids.to_vec();
    let word_ids = vocab_size.saturating_sub(NUM_SPECIALS as usize);
    let actions = positions
        .iter()
        .map(|&p| {
            let u: f64 = rng.random();
            let action = if u < action_probs[0] {
                MaskAction::MaskToken
            } else if u < action_probs[0] + action_probs[1] {
                MaskAction::RandomToken
            } else {
                MaskAction::Keep
            };
            match action {
                MaskAction::MaskToken => corrupted[p] = MASK_ID,
                MaskAction::RandomToken if word_ids > 0 => {
                    corrupted[p] = NUM_SPECIALS + rng.random_range(0..word_ids as u32);
                }
                _ => {}
            }
            action
        })
        .collect();
    Ok((MaskPlan { positions, actions }, corrupted))
}

/// Vocabulary classifier applied to multimodal text outputs.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub transform: Linear,
    pub decoder: Linear,
}

impl MlmHead {
    pub fn new(scope: &Scope, hidden: usize, vocab: usize) -> Result<Self> {
        Ok(Self {
            transform: Linear::new(&scope.pp("transform"), hidden, hidden)?,
            decoder: Linear::new(&scope.pp("decoder"), hidden, vocab)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.decoder
            .forward(&self.transform.forward(xs)?.gelu_erf()?)
    }
}

/// Mean cross-entropy over the masked positions of every caption.
///
/// `logits` is [B, 1 + L, V] where row 0 of each sample is the class token,
/// so caption position `p` is read at row `p + 1`. Unmasked rows are never
/// read; an empty batch of plans gives 0.
pub fn mlm_loss(logits: &Tensor, plans: &[MaskPlan], true_ids: &[Vec<u32>]) -> Result<Tensor> {
    let (b, len, vocab) = logits.dims3()?;
    if plans.len() != b || true_ids.len() != b {
        return Err(Error::Config(
            "one plan and one id list per sample required".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, (plan, ids)) in plans.iter().zip(true_ids).enumerate() {
        for &p in &plan.positions {
            if p + 1 >= len || p >= ids.len() {
                return Err(Error::Config(format!(
                    "masked position {p} outside the caption"
                )));
            }
            rows.push((s * len + p + 1) as u32);
            targets.push(ids[p]);
        }
    }
    if rows.is_empty() {
        return Ok(Tensor::zeros((), DTYPE, &device())?);
    }
    let idx = Tensor::from_vec(rows.clone(), rows.len(), &device())?;
    let picked = logits.reshape((b * len, vocab))?.index_select(&idx, 0)?;
    cross_entropy(&picked, &targets)
}
