//! Binary cross-entropy + soft Dice training loss and hard-threshold
//! Dice / IoU evaluation metrics.

use crate::error::{Error, Result};
use crate::numerics::act::sigmoid;
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

/// Soft Dice smoothing; avoids 0/0 on empty predictions.
pub const DICE_EPS: f64 = 1.0;

fn check_same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            axis: 0,
            message: format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// BCE (mean over voxels, computed stably from logits) plus
/// lambda_dice * (1 - softDice). Returns (total, bce_term).
pub fn bce_dice_loss<F: Real>(
    logits: &Tensor<F>,
    mask: &Tensor<F>,
    lambda_dice: f64,
) -> Result<(F, F)> {
    check_same_shape(logits, mask)?;
    let n = F::from_f64(logits.len() as f64);
    let mut bce = F::zero();
    let mut sum_p = F::zero();
    let mut sum_g = F::zero();
    let mut sum_pg = F::zero();
    for (&l, &g) in logits.data().iter().zip(mask.data()) {
        // softplus(l) - l*g, stable form
        let term = l.max(F::zero()) - l * g + (-l.abs()).exp().ln_1p();
        bce += term;
        let p = sigmoid(l);
        sum_p += p;
        sum_g += g;
        sum_pg += p * g;
    }
    bce = bce / n;
    let eps = F::from_f64(DICE_EPS);
    let soft_dice = (F::from_f64(2.0) * sum_pg + eps) / (sum_p + sum_g + eps);
    let total = bce + F::from_f64(lambda_dice) * (F::one() - soft_dice);
    Ok((total, bce))
}

/// d(loss)/d(logits).
pub fn bce_dice_loss_backward<F: Real>(
    logits: &Tensor<F>,
    mask: &Tensor<F>,
    lambda_dice: f64,
) -> Result<Tensor<F>> {
    check_same_shape(logits, mask)?;
    let inv_n = F::from_f64(1.0 / logits.len() as f64);
    let eps = F::from_f64(DICE_EPS);
    let two = F::from_f64(2.0);
    let lam = F::from_f64(lambda_dice);
    let mut sum_p = F::zero();
    let mut sum_g = F::zero();
    let mut sum_pg = F::zero();
    for (&l, &g) in logits.data().iter().zip(mask.data()) {
        let p = sigmoid(l);
        sum_p += p;
        sum_g += g;
        sum_pg += p * g;
    }
    let a = two * sum_pg + eps;
    let b = sum_p + sum_g + eps;
    let mut grad = Tensor::zeros(logits.shape());
    for ((gv, &l), &g) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(mask.data())
    {
        let p = sigmoid(l);
        let dbce = (p - g) * inv_n;
        // dS/dp = (2 g b - a) / b^2; loss term is -lambda * S
        let ds_dp = (two * g * b - a) / (b * b);
        let ddice = -lam * ds_dp * p * (F::one() - p);
        *gv = dbce + ddice;
    }
    Ok(grad)
}

fn overlap_counts<F: Real>(prob: &Tensor<F>, mask: &Tensor<F>, threshold: f64) -> (u64, u64, u64) {
    let t = F::from_f64(threshold);
    let half = F::from_f64(0.5);
    let mut inter = 0u64;
    let mut a = 0u64;
    let mut b = 0u64;
    for (&p, &g) in prob.data().iter().zip(mask.data()) {
        let pa = p > t;
        let gb = g > half;
        if pa {
            a += 1;
        }
        if gb {
            b += 1;
        }
        if pa && gb {
            inter += 1;
        }
    }
    (inter, a, b)
}

/// 2|A∩B| / (|A|+|B|) on hard-thresholded prob. Empty vs empty -> 1.0.
pub fn dice_metric<F: Real>(prob: &Tensor<F>, mask: &Tensor<F>, threshold: f64) -> Result<f64> {
    check_same_shape(prob, mask)?;
    let (inter, a, b) = overlap_counts(prob, mask, threshold);
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// |A∩B| / |A∪B| on hard-thresholded prob. Empty vs empty -> 1.0.
pub fn iou_metric<F: Real>(prob: &Tensor<F>, mask: &Tensor<F>, threshold: f64) -> Result<f64> {
    check_same_shape(prob, mask)?;
    let (inter, a, b) = overlap_counts(prob, mask, threshold);
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
