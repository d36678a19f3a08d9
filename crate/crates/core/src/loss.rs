//! Soft-dice and cross-entropy segmentation losses with deep supervision.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::downsample_labels;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the dice term; cross-entropy gets `1 - lambda`.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.6 }
    }
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {lambda}")));
        }
        Ok(Self { lambda })
    }
}

/// One-hot encoding `[classes, N]` of `labels`.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let n = labels.len();
    let mut data = vec![0.0; classes * n];
    for (p, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::dim(format!("label {l} out of range for {classes} classes")));
        }
        data[l * n + p] = 1.0;
    }
    Tensor::new(&[classes, n], data)
}

fn flatten_logits(t: &mut Tape, logits: Var, labels: usize) -> Result<Var> {
    let shape = t.shape(logits).to_vec();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    if n != labels {
        return Err(Error::dim(format!("logits {shape:?} cover {n} pixels but {labels} labels were given")));
    }
    t.reshape(logits, &[c, n])
}

/// `1 - mean_c (2 Σ p g + ε) / (Σ p + Σ g + ε)` with `p = softmax(logits)`
/// over the class axis (axis 0).
pub fn dice_loss(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let x = flatten_logits(t, logits, labels.len())?;
    let c = t.shape(x)[0];
    let g = one_hot(labels, c)?;
    let gsum = Tensor::from_fn(&[c], |k| g.data()[k * labels.len()..(k + 1) * labels.len()].iter().sum());
    let p = t.softmax(x, 0)?;
    let g = t.constant(g);
    let pg = t.mul(p, g)?;
    let inter = t.sum_axis(pg, 1)?;
    let num = t.scale(inter, 2.0);
    let num = t.add_scalar(num, DICE_EPS);
    let psum = t.sum_axis(p, 1)?;
    let gsum = t.constant(gsum);
    let den = t.add(psum, gsum)?;
    let den = t.add_scalar(den, DICE_EPS);
    let dice = t.div(num, den)?;
    let m = t.mean(dice);
    let neg = t.scale(m, -1.0);
    Ok(t.add_scalar(neg, 1.0))
}

/// Mean pixel-wise cross-entropy.
pub fn ce_loss(t: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let x = flatten_logits(t, logits, labels.len())?;
    t.cross_entropy(x, Arc::from(labels))
}

/// `λ·dice + (1 − λ)·CE` on one head.
pub fn head_loss(t: &mut Tape, logits: Var, labels: &[usize], cfg: LossConfig) -> Result<Var> {
    let d = dice_loss(t, logits, labels)?;
    let ce = ce_loss(t, logits, labels)?;
    let d = t.scale(d, cfg.lambda);
    let ce = t.scale(ce, 1.0 - cfg.lambda);
    t.add(d, ce)
}

/// Weights of the main head followed by `n_aux` auxiliary heads: `1, 1/2,
/// 1/4, ...`, normalized to sum to one.
pub fn supervision_weights(n_aux: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..=n_aux).map(|i| 0.5f64.powi(i as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Deep-supervised loss. `logits` is `[C, H, W]`; each auxiliary head is
/// `[C, H/f, W/f]` and is scored against nearest-downsampled labels.
pub fn combined_loss(
    t: &mut Tape,
    logits: Var,
    aux_logits: &[Var],
    labels: &[usize],
    grid: (usize, usize),
    cfg: LossConfig,
) -> Result<Var> {
    if aux_logits.is_empty() {
        return head_loss(t, logits, labels, cfg);
    }
    let weights = supervision_weights(aux_logits.len());
    let main = head_loss(t, logits, labels, cfg)?;
    let mut total = t.scale(main, weights[0]);
    for (&aux, &w) in aux_logits.iter().zip(&weights[1..]) {
        let shape = t.shape(aux).to_vec();
        if shape.len() != 3 || grid.0 % shape[1] != 0 || grid.1 % shape[2] != 0 || grid.0 / shape[1] != grid.1 / shape[2] {
            return Err(Error::dim(format!("auxiliary logits {shape:?} do not tile a {}x{} label grid", grid.0, grid.1)));
        }
        let small = downsample_labels(labels, grid.0, grid.1, grid.0 / shape[1]);
        let l = head_loss(t, aux, &small, cfg)?;
        let l = t.scale(l, w);
        total = t.add(total, l)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        let w = supervision_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] / w[1] - 2.0).abs() < 1e-12);
        assert_eq!(supervision_weights(0), vec![1.0]);
    }

    #[test]
    fn lambda_range() {
        assert!(LossConfig::new(1.5).is_err());
        assert!(LossConfig::new(-0.1).is_err());
        assert_eq!(LossConfig::default().lambda, 0.6);
    }

    #[test]
    fn class_count_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(dice_loss(&mut t, x, &[0, 1, 2, 0]).is_err());
        assert!(dice_loss(&mut t, x, &[0, 1, 1]).is_err());
    }
}
