//! Deeply supervised BCE + Dice loss.

use crate::error::{Error, Result};
use crate::head::StagePrediction;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Smoothing term of the Dice loss.
pub const DICE_EPS: f64 = 1.0;

pub fn bce_loss<'t, T: Scalar>(logits: &Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    logits.bce_with_logits(target)
}

pub fn dice_loss<'t, T: Scalar>(logits: &Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    logits.dice_loss(target, DICE_EPS)
}

/// `bce + dice` for one logit map already at target resolution.
pub fn stage_loss<'t, T: Scalar>(logits: &Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    bce_loss(logits, target)?.add(&dice_loss(logits, target)?)
}

/// Mean over stages of `bce + dice`, each prediction bilinearly upsampled to
/// the target resolution first.
pub fn total_loss<'t, T: Scalar>(preds: &[StagePrediction<'t, T>], target: &Tensor<T>) -> Result<Var<'t, T>> {
    if preds.is_empty() {
        return Err(Error::shape("total_loss", "no predictions"));
    }
    let th = target.shape().get(2).copied().unwrap_or(0);
    let mut total: Option<Var<'t, T>> = None;
    for p in preds {
        let s = p.logits.shape();
        if s.len() != 4 || s[2] == 0 || th % s[2] != 0 || target.shape()[3] != s[3] * (th / s[2]) {
            return Err(Error::shape(
                "total_loss",
                format!("stage {} logits {s:?} vs target {:?}", p.stage, target.shape()),
            ));
        }
        let up = p.logits.upsample_bilinear(th / s[2])?;
        let l = stage_loss(&up, target)?;
        total = Some(match total {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    total.unwrap().scale(1.0 / preds.len() as f64)
}
