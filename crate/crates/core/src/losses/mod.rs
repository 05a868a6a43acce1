//! Segmentation and contrastive losses.

pub mod contrastive;
pub mod dice;

pub use contrastive::{
    class_means, class_means_backward, contrastive_batch_loss, contrastive_batch_loss_eps, contrastive_pair_loss,
    contrastive_pair_loss_grad, contrastive_pixel_term, cosine_sim, pooled_class_means, sample_anchor_set,
    sample_coords, BatchContrastive, ClassMeanSet, ContrastiveConfig, Coord, FeatureMap, MatchMode, PairGrad,
    PairLoss, PixelCoordSet,
};
pub use dice::{dice_loss, dice_loss_grad, DICE_EPS};

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Where a slice's label map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    Pseudo,
    /// No label map; the slice's labels are all background placeholders.
    None,
}

impl Provenance {
    pub fn has_labels(self) -> bool {
        !matches!(self, Provenance::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossComponents {
    pub seg: f64,
    pub cont: f64,
    pub lambda_cont: f64,
    pub total: f64,
}

/// `L_seg(ground-truth slices) + λ·L_cont(all slices carrying labels or pseudo-labels)`.
///
/// `probs` and `z` hold one item per slice in `provenance` order; `labels` holds the slices'
/// label maps back to back. `z` may be omitted when `λ = 0`, in which case the contrastive
/// term is skipped without touching `rng`.
pub fn total_loss<T: Real, R: Rng + ?Sized>(
    probs: &Tensor<T>,
    z: Option<&Tensor<T>>,
    labels: &[u8],
    provenance: &[Provenance],
    num_classes: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<LossComponents> {
    if provenance.len() != probs.n {
        return Err(Error::DimMismatch(format!(
            "{} provenance flags for {} slices",
            provenance.len(),
            probs.n
        )));
    }
    let hw = probs.plane();
    let gt: Vec<usize> = (0..probs.n).filter(|&i| provenance[i] == Provenance::GroundTruth).collect();
    if gt.is_empty() {
        return Err(Error::EmptyPool("labeled slices in batch"));
    }
    let seg_labels: Vec<u8> = gt.iter().flat_map(|&i| labels[i * hw..(i + 1) * hw].iter().copied()).collect();
    let seg = dice_loss(&probs.select(&gt), &seg_labels)?.as_f64();

    let cont = if cfg.lambda_cont == 0.0 {
        0.0
    } else {
        let z = z.ok_or_else(|| Error::invalid("z", "contrastive representations required when lambda_cont > 0"))?;
        let idx: Vec<usize> = (0..z.n).filter(|&i| provenance[i].has_labels()).collect();
        if idx.is_empty() {
            0.0
        } else {
            let lab: Vec<u8> = idx.iter().flat_map(|&i| labels[i * hw..(i + 1) * hw].iter().copied()).collect();
            contrastive_batch_loss(&z.select(&idx), &lab, num_classes, cfg, rng, false)?
                .value
                .as_f64()
        }
    };
    Ok(LossComponents {
        seg,
        cont,
        lambda_cont: cfg.lambda_cont,
        total: seg + cfg.lambda_cont * cont,
    })
}
