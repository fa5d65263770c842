//! Classification heads on the multimodal class token: 3-way entailment,
//! the two-image binary task and its text-assignment pretask.

use candle_core::Tensor;

use crate::data::ImageTensor;
use crate::model::{LayeredBatch, Linear, Scope, VichaModel};
use crate::ops::softmax_last;
use crate::{Error, Result};

pub const ENTAILMENT_LABELS: [&str; 3] = ["contradiction", "neutral", "entailment"];
pub const ASSIGNMENT_LABELS: [&str; 3] = ["image_a", "image_b", "neither"];

/// Two fully connected layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct EntailmentHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl EntailmentHead {
    pub fn new(scope: &Scope, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(&scope.pp("hidden"), hidden_dim, hidden_dim)?,
            output: Linear::new(&scope.pp("output"), hidden_dim, ENTAILMENT_LABELS.len())?,
        })
    }

    pub fn logits(&self, cls: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.hidden.forward(cls)?.relu()?)
    }

    /// [B, 3] probabilities in [`ENTAILMENT_LABELS`] order.
    pub fn forward(&self, cls: &Tensor) -> Result<Tensor> {
        softmax_last(&self.logits(cls)?)
    }
}

/// Heads over the replicated decoder. The assignment head scores image A
/// from merge(a, b) and image B from merge(b, a) with shared weights, so it
/// treats the two images symmetrically while both branches hold equal weights.
#[derive(Debug, Clone)]
pub struct PairedHeads {
    pub binary: Linear,
    pub assign_image: Linear,
    pub assign_neither: Linear,
}

impl PairedHeads {
    pub fn new(scope: &Scope, hidden_dim: usize) -> Result<Self> {
        Ok(Self {
            binary: Linear::new(&scope.pp("binary"), hidden_dim, 2)?,
            assign_image: Linear::new(&scope.pp("assign_image"), hidden_dim, 1)?,
            assign_neither: Linear::new(&scope.pp("assign_neither"), hidden_dim, 1)?,
        })
    }
}

/// Text and the two images encoded by the online encoders.
pub struct PairedInputs {
    pub text: LayeredBatch,
    pub image_a: LayeredBatch,
    pub image_b: LayeredBatch,
}

pub fn encode_paired(
    model: &VichaModel,
    text: &[Vec<u32>],
    images_a: &[ImageTensor],
    images_b: &[ImageTensor],
) -> Result<PairedInputs> {
    if text.len() != images_a.len() || text.len() != images_b.len() {
        return Err(Error::Config(format!(
            "paired batch of {} texts, {} and {} images",
            text.len(),
            images_a.len(),
            images_b.len()
        )));
    }
    let stack = |imgs: &[ImageTensor]| -> Result<Tensor> {
        VichaModel::stack_images(
            &imgs
                .iter()
                .map(ImageTensor::to_tensor)
                .collect::<Result<Vec<_>>>()?,
        )
    };
    Ok(PairedInputs {
        text: model.online.text.forward(text)?,
        image_a: model.online.vision.forward(&stack(images_a)?, None)?,
        image_b: model.online.vision.forward(&stack(images_b)?, None)?,
    })
}

fn branch_class_tokens(
    model: &VichaModel,
    inputs: &PairedInputs,
    swap: bool,
) -> Result<(Tensor, Tensor)> {
    let paired = model.paired.as_ref().ok_or_else(|| {
        Error::Usage("the multimodal decoder has not been replicated for image pairs".into())
    })?;
    let (a, b) = if swap {
        (&inputs.image_b, &inputs.image_a)
    } else {
        (&inputs.image_a, &inputs.image_b)
    };
    let (oa, ob) = paired.forward_branches(
        inputs.text.last(),
        inputs.text.mask.as_ref(),
        (a.last(), a.mask.as_ref()),
        (b.last(), b.mask.as_ref()),
    )?;
    Ok((
        oa.narrow(1, 0, 1)?.squeeze(1)?,
        ob.narrow(1, 0, 1)?.squeeze(1)?,
    ))
}

fn merge(model: &VichaModel, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let paired = model
        .paired
        .as_ref()
        .expect("checked by branch_class_tokens");
    Ok(paired.merge.forward(&Tensor::cat(&[a, b], 1)?)?.relu()?)
}

/// [B, 2] logits: (does not describe both images, describes both).
pub fn paired_image_logits(
    model: &VichaModel,
    heads: &PairedHeads,
    inputs: &PairedInputs,
) -> Result<Tensor> {
    let (a, b) = branch_class_tokens(model, inputs, false)?;
    heads.binary.forward(&merge(model, &a, &b)?)
}

pub fn paired_image_forward(
    model: &VichaModel,
    heads: &PairedHeads,
    inputs: &PairedInputs,
) -> Result<Tensor> {
    softmax_last(&paired_image_logits(model, heads, inputs)?)
}

/// [B, 3] logits in [`ASSIGNMENT_LABELS`] order.
pub fn text_assignment_logits(
    model: &VichaModel,
    heads: &PairedHeads,
    inputs: &PairedInputs,
) -> Result<Tensor> {
    let (a, b) = branch_class_tokens(model, inputs, false)?;
    let ab = merge(model, &a, &b)?;
    let ba = merge(model, &b, &a)?;
    let both = ((&ab + &ba)? * 0.5)?;
    Ok(Tensor::cat(
        &[
            heads.assign_image.forward(&ab)?,
            heads.assign_image.forward(&ba)?,
            heads.assign_neither.forward(&both)?,
        ],
        1,
    )?)
}

pub fn text_assignment_pretask(
    model: &VichaModel,
    heads: &PairedHeads,
    inputs: &PairedInputs,
) -> Result<Tensor> {
    softmax_last(&text_assignment_logits(model, heads, inputs)?)
}
