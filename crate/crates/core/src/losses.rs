//! Soft Dice plus voxel-wise cross-entropy over softmax class scores.
//!
//! Everything is accumulated in `f64`. The `*_f32` entry points convert the
//! network's `f32` scores and return an `f32` score gradient for training.

use ndarray::{Array4, Array5, ArrayView4, ArrayView5, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Integer class labels, `(B, D, H, W)`.
pub type Labels = Array4<u8>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub w_dice: f64,
    pub w_ce: f64,
    /// Smoothing added to numerator and denominator of the soft Dice ratio.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_dice: 1.0,
            w_ce: 1.0,
            dice_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_dice >= 0.0 && self.w_ce >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got dice {} and ce {}",
                self.w_dice, self.w_ce
            )));
        }
        if !(self.dice_eps >= 0.0 && self.dice_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "dice smoothing must be finite and non-negative, got {}",
                self.dice_eps
            )));
        }
        Ok(())
    }
}

/// Unweighted components and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice_component: f64,
    pub ce_component: f64,
    pub total: f64,
}

fn check(scores: &ArrayView5<f64>, target: &ArrayView4<u8>) -> Result<usize> {
    let s = scores.shape();
    let c = s[1];
    if c < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, got {c}")));
    }
    if target.shape() != [s[0], s[2], s[3], s[4]] {
        return Err(Error::Shape(format!(
            "scores {:?} and target {:?} disagree",
            s,
            target.shape()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("scores contain non-finite values".into()));
    }
    if let Some(&t) = target.iter().find(|&&t| usize::from(t) >= c) {
        return Err(Error::InvalidArgument(format!("label {t} outside [0, {c})")));
    }
    Ok(c)
}

/// Softmax over the class axis.
pub fn softmax(scores: &ArrayView5<f64>) -> Array5<f64> {
    let mut p = scores.to_owned();
    p.lanes_mut(Axis(1)).into_iter().for_each(|mut lane| {
        let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - m).exp());
        let z = lane.sum();
        lane.mapv_inplace(|v| v / z);
    });
    p
}

/// Backpropagates a probability gradient through the softmax.
fn softmax_backward(p: &Array5<f64>, dp: &Array5<f64>) -> Array5<f64> {
    let mut ds = dp.clone();
    Zip::from(ds.lanes_mut(Axis(1)))
        .and(p.lanes(Axis(1)))
        .for_each(|mut d, p| {
            let dot: f64 = d.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
            Zip::from(&mut d).and(&p).for_each(|dv, &pv| *dv = pv * (*dv - dot));
        });
    ds
}

/// Soft Dice loss `1 − (2Σpg + ε)/(Σp² + Σg² + ε)` on each foreground
/// class, with sums over the whole batch, averaged over foreground classes.
/// Also returns the gradient with respect to the probabilities.
fn dice_on_probs(p: &Array5<f64>, target: &ArrayView4<u8>, eps: f64) -> (f64, Array5<f64>) {
    let c = p.shape()[1];
    let mut dp = Array5::<f64>::zeros(p.raw_dim());
    let mut loss = 0.0;
    let scale = 1.0 / (c - 1) as f64;
    for k in 1..c {
        let pk = p.index_axis(Axis(1), k);
        let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
        Zip::from(&pk).and(target).for_each(|&pv, &t| {
            let g = f64::from(u8::from(usize::from(t) == k));
            inter += pv * g;
            pp += pv * pv;
            gg += g;
        });
        let num = 2.0 * inter + eps;
        let den = pp + gg + eps;
        loss += scale * (1.0 - num / den);
        let mut dk = dp.index_axis_mut(Axis(1), k);
        Zip::from(&mut dk).and(&pk).and(target).for_each(|d, &pv, &t| {
            let g = f64::from(u8::from(usize::from(t) == k));
            *d = -scale * (2.0 * g * den - num * 2.0 * pv) / (den * den);
        });
    }
    (loss, dp)
}

pub fn soft_dice_loss(scores: ArrayView5<f64>, target: ArrayView4<u8>, eps: f64) -> Result<f64> {
    check(&scores, &target)?;
    Ok(dice_on_probs(&softmax(&scores), &target, eps).0)
}

pub fn soft_dice_loss_grad(
    scores: ArrayView5<f64>,
    target: ArrayView4<u8>,
    eps: f64,
) -> Result<(f64, Array5<f64>)> {
    check(&scores, &target)?;
    let p = softmax(&scores);
    let (l, dp) = dice_on_probs(&p, &target, eps);
    Ok((l, softmax_backward(&p, &dp)))
}

/// Mean over voxels of `−log softmax(scores)[target]`, with its gradient.
fn ce_with_grad(scores: &ArrayView5<f64>, target: &ArrayView4<u8>) -> (f64, Array5<f64>) {
    let n = target.len() as f64;
    let p = softmax(scores);
    let mut loss = 0.0;
    let mut grad = p.clone();
    Zip::from(grad.lanes_mut(Axis(1)))
        .and(scores.lanes(Axis(1)))
        .and(target)
        .for_each(|mut g, s, &t| {
            let t = usize::from(t);
            let m = s.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - s[t];
            g[t] -= 1.0;
            g.mapv_inplace(|v| v / n);
        });
    (loss / n, grad)
}

pub fn cross_entropy_loss(scores: ArrayView5<f64>, target: ArrayView4<u8>) -> Result<f64> {
    check(&scores, &target)?;
    Ok(ce_with_grad(&scores, &target).0)
}

pub fn cross_entropy_loss_grad(
    scores: ArrayView5<f64>,
    target: ArrayView4<u8>,
) -> Result<(f64, Array5<f64>)> {
    check(&scores, &target)?;
    Ok(ce_with_grad(&scores, &target))
}

/// `w_dice·dice + w_ce·ce` and its gradient with respect to the scores.
pub fn combined_loss_grad(
    scores: ArrayView5<f64>,
    target: ArrayView4<u8>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Array5<f64>)> {
    cfg.validate()?;
    check(&scores, &target)?;
    let p = softmax(&scores);
    let (dice, dp) = dice_on_probs(&p, &target, cfg.dice_eps);
    let (ce, dce) = ce_with_grad(&scores, &target);
    let mut grad = softmax_backward(&p, &dp);
    grad *= cfg.w_dice;
    grad.scaled_add(cfg.w_ce, &dce);
    let b = LossBreakdown {
        dice_component: dice,
        ce_component: ce,
        total: cfg.w_dice * dice + cfg.w_ce * ce,
    };
    Ok((b, grad))
}

pub fn combined_loss(
    scores: ArrayView5<f64>,
    target: ArrayView4<u8>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(combined_loss_grad(scores, target, cfg)?.0)
}

/// Training entry point on network scores.
pub fn combined_loss_grad_f32(
    scores: &Tensor,
    target: &Labels,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor)> {
    let s = scores.mapv(f64::from);
    let (b, g) = combined_loss_grad(s.view(), target.view(), cfg)?;
    Ok((b, g.mapv(|v| v as f32)))
}

pub fn combined_loss_f32(scores: &Tensor, target: &Labels, cfg: &LossConfig) -> Result<LossBreakdown> {
    let s = scores.mapv(f64::from);
    combined_loss(s.view(), target.view(), cfg)
}

/// Per-voxel argmax over classes, `(B, D, H, W)`.
pub fn argmax_labels(scores: &Tensor) -> Labels {
    let s = scores.shape();
    let mut out = Labels::zeros((s[0], s[2], s[3], s[4]));
    Zip::from(&mut out)
        .and(scores.lanes(Axis(1)))
        .for_each(|o, lane| {
            let mut best = 0;
            for (k, &v) in lane.iter().enumerate() {
                if v > lane[best] {
                    best = k;
                }
            }
            *o = best as u8;
        });
    out
}
