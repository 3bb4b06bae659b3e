//! Segmentation loss: soft dice plus gamma-weighted cross-entropy over
//! per-pixel class probabilities and one-hot targets.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, TensorId};
use crate::error::{Error, Result};

/// Loss weights: `dice + gamma * ce`, with the dice smoothing term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossConfig {
    pub gamma: f64,
    pub dice_smooth: f64,
}

impl Default for SegLossConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            dice_smooth: 1e-5,
        }
    }
}

impl SegLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config("dice smoothing must be positive".into()));
        }
        Ok(())
    }
}

fn check_one_hot<F: Scalar>(probs_shape: &[usize], target: &ArrayD<F>) -> Result<()> {
    if target.shape() != probs_shape {
        return Err(Error::Usage(format!(
            "target shape {:?} does not match probabilities {:?}",
            target.shape(),
            probs_shape
        )));
    }
    if target.ndim() != 4 {
        return Err(Error::Usage("target must be NCHW one-hot".into()));
    }
    let t = target.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (b, k, h, w) = t.dim();
    let one = F::one();
    let zero = F::zero();
    for bi in 0..b {
        for r in 0..h {
            for c in 0..w {
                let mut sum = zero;
                for ki in 0..k {
                    let v = t[[bi, ki, r, c]];
                    if v != zero && v != one {
                        return Err(Error::Usage(format!(
                            "target is not one-hot at ({bi},{ki},{r},{c}): {v}"
                        )));
                    }
                    sum += v;
                }
                if sum != one {
                    return Err(Error::Usage(format!(
                        "target channels sum to {sum} at ({bi},{r},{c})"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn dice_terms<F: Scalar>(
    g: &mut Graph<F>,
    probs: TensorId,
    target: TensorId,
    smooth: F,
) -> TensorId {
    // Per (batch, class): 1 - mean of (2*sum(p*t) + eps) / (sum p + sum t + eps).
    let pt = g.mul(probs, target);
    let inter = g.sum_spatial(pt);
    let psum = g.sum_spatial(probs);
    let tsum = g.sum_spatial(target);
    let two_inter = g.scale(inter, F::from_f64(2.0));
    let num = g.add_scalar(two_inter, smooth);
    let den_sum = g.add(psum, tsum);
    let den = g.add_scalar(den_sum, smooth);
    let frac = g.div(num, den);
    let mean = g.mean_all(frac);
    let neg = g.scale(mean, -F::one());
    g.add_scalar(neg, F::one())
}

fn ce_terms<F: Scalar>(g: &mut Graph<F>, probs: TensorId, target: TensorId) -> TensorId {
    let shape = g.value(probs).shape().to_vec();
    let pixels = shape[0] * shape[2] * shape[3];
    let lo = F::from_f64(1e-7);
    let hi = F::one() - lo;
    let clamped = g.clamp(probs, lo, hi);
    let logp = g.ln(clamped);
    let tl = g.mul(target, logp);
    let total = g.sum_all(tl);
    g.scale(total, -F::one() / F::from_f64(pixels as f64))
}

/// Soft dice loss. Errors if the target is not one-hot.
pub fn dice_loss<F: Scalar>(
    g: &mut Graph<F>,
    probs: TensorId,
    target: &ArrayD<F>,
    smooth: f64,
) -> Result<TensorId> {
    check_one_hot(g.value(probs).shape(), target)?;
    let t = g.leaf(target.clone());
    Ok(dice_terms(g, probs, t, F::from_f64(smooth)))
}

/// Mean over pixels of `-sum_k t_k log p_k`; probabilities are clamped to
/// `[1e-7, 1 - 1e-7]` before the log.
pub fn ce_loss<F: Scalar>(g: &mut Graph<F>, probs: TensorId, target: &ArrayD<F>) -> Result<TensorId> {
    if target.shape() != g.value(probs).shape() {
        return Err(Error::Usage(format!(
            "target shape {:?} does not match probabilities {:?}",
            target.shape(),
            g.value(probs).shape()
        )));
    }
    let t = g.leaf(target.clone());
    Ok(ce_terms(g, probs, t))
}

/// Combined loss `dice + gamma * ce`.
pub fn seg_loss<F: Scalar>(
    g: &mut Graph<F>,
    probs: TensorId,
    target: &ArrayD<F>,
    cfg: &SegLossConfig,
) -> Result<TensorId> {
    check_one_hot(g.value(probs).shape(), target)?;
    let t = g.leaf(target.clone());
    let dice = dice_terms(g, probs, t, F::from_f64(cfg.dice_smooth));
    let ce = ce_terms(g, probs, t);
    let weighted = g.scale(ce, F::from_f64(cfg.gamma));
    Ok(g.add(dice, weighted))
}

/// One-hot encoding of binary masks into an (N, 2, H, W) target tensor.
pub fn one_hot_target<F: Scalar>(masks: &[ndarray::ArrayView2<'_, u8>]) -> ArrayD<F> {
    assert!(!masks.is_empty());
    let (h, w) = masks[0].dim();
    let mut t = ndarray::Array4::<F>::zeros((masks.len(), 2, h, w));
    for (b, m) in masks.iter().enumerate() {
        assert_eq!(m.dim(), (h, w), "mask shapes must agree within a batch");
        for ((r, c), &v) in m.indexed_iter() {
            let k = usize::from(v != 0);
            t[[b, k, r, c]] = F::one();
        }
    }
    t.into_dyn()
}
