//! Segmentation loss: mean per-pixel binary cross-entropy plus a weighted
//! soft Dice term.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the
//! logarithms only; the Dice term sees them unclamped, so an exact 0/1
//! prediction has zero Dice loss.

use candle_core::Tensor;

use crate::error::Result;

pub const PROB_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

/// Loss and its gradient with respect to each probability.
pub fn segmentation_loss(probs: &[f64], target: &[f64], lambda_dice: f64) -> (LossValue, Vec<f64>) {
    assert_eq!(probs.len(), target.len());
    let n = probs.len() as f64;
    let (mut bce, mut inter, mut sum_p, mut sum_g) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(target) {
        let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        inter += p * g;
        sum_p += p;
        sum_g += g;
    }
    bce /= n;
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_g + DICE_SMOOTH;
    let dice = 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let d_bce = if p > PROB_EPS && p < 1.0 - PROB_EPS {
                (-g / p + (1.0 - g) / (1.0 - p)) / n
            } else {
                0.0
            };
            let d_dice = -(2.0 * g * den - num) / (den * den);
            d_bce + lambda_dice * d_dice
        })
        .collect();
    (
        LossValue {
            total: bce + lambda_dice * dice,
            bce,
            dice,
        },
        grad,
    )
}

/// Differentiable loss terms on tensors of identical shape.
#[derive(Debug, Clone)]
pub struct LossTensors {
    pub total: Tensor,
    pub bce: Tensor,
    pub dice: Tensor,
}

pub fn segmentation_loss_tensor(probs: &Tensor, target: &Tensor, lambda_dice: f64) -> Result<LossTensors> {
    let pc = probs.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_t = target.affine(-1.0, 1.0)?;
    let log_p = pc.log()?;
    let log_q = pc.affine(-1.0, 1.0)?.log()?;
    let bce = ((target * log_p)? + (one_minus_t * log_q)?)?.mean_all()?.neg()?;
    let inter = (probs * target)?.sum_all()?;
    let den = ((probs.sum_all()? + target.sum_all()?)? + DICE_SMOOTH)?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&den)?.affine(-1.0, 1.0)?;
    let total = (&bce + (&dice * lambda_dice)?)?;
    Ok(LossTensors { total, bce, dice })
}
