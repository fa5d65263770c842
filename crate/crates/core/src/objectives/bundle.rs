use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_LAMBDA_HITC: f64 = 0.1;
pub const DEFAULT_LAMBDA_MIM: f64 = 1.0;

/// Unweighted component losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub itm: f64,
    pub mlm: f64,
    pub hitc: f64,
    pub mim: f64,
    pub total: f64,
    pub lambda_hitc: f64,
    pub lambda_mim: f64,
}

/// `total = itm + mlm + λ_hitc·hitc + λ_mim·mim`.
pub fn weighted_total(
    itm: f64,
    mlm: f64,
    hitc: f64,
    mim: f64,
    lambda_hitc: f64,
    lambda_mim: f64,
) -> f64 {
    itm + mlm + lambda_hitc * hitc + lambda_mim * mim
}

pub fn combine_losses(
    itm: f64,
    mlm: f64,
    hitc: f64,
    mim: f64,
    lambda_hitc: f64,
    lambda_mim: f64,
) -> Result<LossBundle> {
    for (loss, value) in [("itm", itm), ("mlm", mlm), ("hitc", hitc), ("mim", mim)] {
        if !value.is_finite() {
            return Err(Error::NonFinite { loss, value });
        }
    }
    Ok(LossBundle {
        itm,
        mlm,
        hitc,
        mim,
        total: weighted_total(itm, mlm, hitc, mim, lambda_hitc, lambda_mim),
        lambda_hitc,
        lambda_mim,
    })
}
