//! Dice scores, test-set evaluation, multi-run aggregation and representation export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelVolume, LabeledVolume};
use crate::error::{Error, Result};
use crate::losses::sample_coords;
use crate::network::{Mode, Parameters};
use crate::tensor::Tensor;

/// Slices per inference pass.
pub const EVAL_CHUNK: usize = 16;

/// `2|A_c ∩ B_c| / (|A_c| + |B_c|)`, or 1 when class `c` is absent from both masks.
pub fn dsc(a: &[u8], b: &[u8], c: u8) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == c, y == c);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// DSC of classes `1..=c`.
pub fn per_class_dsc(a: &[u8], b: &[u8], c: u8) -> Result<Vec<f64>> {
    (1..=c).map(|k| dsc(a, b, k)).collect()
}

/// Mean DSC over the classes present in at least one mask; 1 when both are all background.
pub fn present_class_mean_dsc(a: &[u8], b: &[u8], c: u8) -> Result<f64> {
    let mut scores = Vec::new();
    for k in 1..=c {
        if a.contains(&k) || b.contains(&k) {
            scores.push(dsc(a, b, k)?);
        }
    }
    Ok(if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub subject_id: String,
    pub per_structure: Vec<f64>,
    pub foreground_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per-structure DSC averaged over volumes (classes 1..=C).
    pub per_structure: Vec<f64>,
    pub foreground_mean: f64,
    pub per_volume: Vec<VolumeScore>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

/// Scores predicted label volumes against ground truth.
pub fn score_predictions(predictions: &[(String, Vec<u8>)], truth: &[&LabelVolume]) -> Result<EvalReport> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::invalid("predictions", "need one prediction per ground-truth volume"));
    }
    let c = truth[0].num_classes;
    let mut per_volume = Vec::with_capacity(truth.len());
    for ((id, pred), gt) in predictions.iter().zip(truth) {
        let per_structure = per_class_dsc(pred, &gt.labels, c)?;
        per_volume.push(VolumeScore {
            subject_id: id.clone(),
            foreground_mean: mean(&per_structure),
            per_structure,
        });
    }
    let per_structure: Vec<f64> = (0..c as usize)
        .map(|k| mean(&per_volume.iter().map(|v| v.per_structure[k]).collect::<Vec<_>>()))
        .collect();
    Ok(EvalReport {
        foreground_mean: mean(&per_structure),
        per_structure,
        per_volume,
        seed: None,
        config: serde_json::Value::Null,
    })
}

/// Slice-wise inference-mode predictions for each volume, scored in 3D.
pub fn evaluate_model(params: &mut Parameters<f32>, volumes: &[LabeledVolume]) -> Result<EvalReport> {
    let mut preds = Vec::with_capacity(volumes.len());
    for (v, _) in volumes {
        preds.push((v.subject_id.clone(), params.predict_labels(&v.intensities, v.slices, EVAL_CHUNK)?));
    }
    let truth: Vec<&LabelVolume> = volumes.iter().map(|(_, l)| l).collect();
    score_predictions(&preds, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation (divisor n).
    pub std: f64,
    pub per_structure_mean: Vec<f64>,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunSummary> {
    if reports.is_empty() {
        return Err(Error::invalid("reports", "need at least one report"));
    }
    let values: Vec<f64> = reports.iter().map(|r| r.foreground_mean).collect();
    let m = mean(&values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    let k = reports[0].per_structure.len();
    let per_structure_mean = (0..k)
        .map(|i| mean(&reports.iter().map(|r| r.per_structure.get(i).copied().unwrap_or(f64::NAN)).collect::<Vec<_>>()))
        .collect();
    Ok(RunSummary {
        runs: reports.len(),
        values,
        mean: m,
        std: var.sqrt(),
        per_structure_mean,
    })
}

/// Writes up to `n_per_class` backbone feature vectors per foreground class and slice as CSV
/// with header `class_id,subject_id,slice,row,col,f0,...`. Returns the number of rows.
pub fn export_pixel_representations<R: Rng + ?Sized>(
    params: &mut Parameters<f32>,
    volumes: &[(&crate::dataset::Volume, &LabelVolume)],
    n_per_class: usize,
    rng: &mut R,
    out: &Path,
) -> Result<usize> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be >= 1"));
    }
    let width = params.config.feature_width();
    let mut text = String::from("class_id,subject_id,slice,row,col");
    for f in 0..width {
        let _ = write!(text, ",f{f}");
    }
    text.push('\n');
    let mut rows = 0;
    for (vol, lab) in volumes {
        let (h, w) = (vol.height, vol.width);
        for s in 0..vol.slices {
            let x = Tensor::from_vec(vol.slice(s).to_vec(), 1, 1, h, w);
            let feats = params.features(&x, Mode::Eval)?;
            let labels = lab.slice(s);
            for c in 1..=lab.num_classes {
                for (r, col) in sample_coords(labels, w, c, n_per_class, rng) {
                    let _ = write!(text, "{c},{},{s},{r},{col}", vol.subject_id);
                    for f in 0..width {
                        let _ = write!(text, ",{}", feats.at(0, f, r, col));
                    }
                    text.push('\n');
                    rows += 1;
                }
            }
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))?;
    Ok(rows)
}
