pub mod bundle;
pub mod hitc;
pub mod itm;
pub mod mim;
pub mod mlm;

pub use bundle::{combine_losses, LossBundle, DEFAULT_LAMBDA_HITC, DEFAULT_LAMBDA_MIM};
pub use hitc::{hitc_loss, FeatureQueue, HitcOutput, HitcState};
pub use itm::{itm_loss, mine_hard_negatives, HardNegatives, ItmHead};
pub use mim::{
    m_mim_loss, masked_patch_mse, plan_image_mask, u_mim_loss, ImageMaskPlan, MimHead, MimVariant,
};
pub use mlm::{mlm_loss, plan_mlm_mask, MaskAction, MaskPlan, MlmHead, DEFAULT_ACTION_PROBS};
