//! Soft Dice loss over foreground classes.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Additive smoothing in numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;

struct Sums {
    inter: Vec<f64>,
    pred_sq: Vec<f64>,
    truth: Vec<f64>,
}

fn check<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<()> {
    if labels.len() != probs.n * probs.plane() {
        return Err(Error::DimMismatch(format!(
            "dice: {} labels for probability maps of shape {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    let c = probs.c - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > c) {
        return Err(Error::LabelOutOfRange {
            value: bad,
            num_classes: c as u8,
        });
    }
    Ok(())
}

fn sums<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Sums {
    let classes = probs.c;
    let hw = probs.plane();
    let mut s = Sums {
        inter: vec![0.0; classes],
        pred_sq: vec![0.0; classes],
        truth: vec![0.0; classes],
    };
    for i in 0..probs.n {
        let item = probs.item(i);
        let lab = &labels[i * hw..(i + 1) * hw];
        for c in 1..classes {
            let p = &item[c * hw..(c + 1) * hw];
            let (mut inter, mut psq, mut g) = (0.0, 0.0, 0.0);
            for (pv, &l) in p.iter().zip(lab) {
                let pv = pv.as_f64();
                psq += pv * pv;
                if l as usize == c {
                    inter += pv;
                    g += 1.0;
                }
            }
            s.inter[c] += inter;
            s.pred_sq[c] += psq;
            s.truth[c] += g;
        }
    }
    s
}

/// `1 − mean_c (2Σ p_c g_c + ε) / (Σ p_c² + Σ g_c² + ε)`, sums taken over every pixel of
/// the batch, the mean over foreground classes present in `labels`. Returns 0 when the
/// batch ground truth contains no foreground.
///
/// `probs` is N×(C+1)×H×W; `labels` holds the N label maps back to back.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<T> {
    check(probs, labels)?;
    let s = sums(probs, labels);
    let present: Vec<usize> = (1..probs.c).filter(|&c| s.truth[c] > 0.0).collect();
    if present.is_empty() {
        return Ok(T::zero());
    }
    let mean: f64 = present
        .iter()
        .map(|&c| (2.0 * s.inter[c] + DICE_EPS) / (s.pred_sq[c] + s.truth[c] + DICE_EPS))
        .sum::<f64>()
        / present.len() as f64;
    Ok(T::from_f64_lossy(1.0 - mean))
}

/// [`dice_loss`] together with its gradient with respect to `probs`.
pub fn dice_loss_grad<T: Real>(probs: &Tensor<T>, labels: &[u8]) -> Result<(T, Tensor<T>)> {
    check(probs, labels)?;
    let s = sums(probs, labels);
    let hw = probs.plane();
    let mut grad = Tensor::zeros(probs.n, probs.c, probs.h, probs.w);
    let present: Vec<usize> = (1..probs.c).filter(|&c| s.truth[c] > 0.0).collect();
    if present.is_empty() {
        return Ok((T::zero(), grad));
    }
    let k = present.len() as f64;
    let mut mean = 0.0;
    for &c in &present {
        let num = 2.0 * s.inter[c] + DICE_EPS;
        let den = s.pred_sq[c] + s.truth[c] + DICE_EPS;
        mean += num / den;
        // d(num/den)/dp = (2g·den − num·2p) / den²; the loss carries −1/k.
        let a = T::from_f64_lossy(-2.0 / (k * den));
        let b = T::from_f64_lossy(2.0 * num / (k * den * den));
        for i in 0..probs.n {
            let p = &probs.item(i)[c * hw..(c + 1) * hw];
            let lab = &labels[i * hw..(i + 1) * hw];
            let g = &mut grad.item_mut(i)[c * hw..(c + 1) * hw];
            for ((gv, pv), &l) in g.iter_mut().zip(p).zip(lab) {
                let truth = if l as usize == c { T::one() } else { T::zero() };
                *gv = a * truth + b * *pv;
            }
        }
    }
    Ok((T::from_f64_lossy(1.0 - mean / k), grad))
}
