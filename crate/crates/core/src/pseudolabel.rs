//! Pseudo-label estimation, storage and the consistency filter.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_geom, invert_geom, sample_affine, AugmentConfig, GeomTransform, Interp};
use crate::dataset::{HiddenTruth, LabelVolume, Volume};
use crate::error::{Error, Result};
use crate::evaluate::{per_class_dsc, present_class_mean_dsc, EVAL_CHUNK};
use crate::network::Parameters;

/// Pseudo-label volumes keyed by subject, with the iteration they were estimated at and the
/// subjects eligible for training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelStore {
    labels: BTreeMap<String, LabelVolume>,
    pub estimation_iteration: u64,
    retained: BTreeSet<String>,
}

impl PseudoLabelStore {
    pub fn new(estimation_iteration: u64) -> Self {
        Self {
            estimation_iteration,
            ..Default::default()
        }
    }

    /// Adds (or replaces) a subject; new subjects start out retained.
    pub fn insert(&mut self, subject_id: &str, labels: LabelVolume) {
        self.labels.insert(subject_id.to_string(), labels);
        self.retained.insert(subject_id.to_string());
    }

    pub fn get(&self, subject_id: &str) -> Option<&LabelVolume> {
        self.labels.get(subject_id)
    }

    pub fn is_retained(&self, subject_id: &str) -> bool {
        self.retained.contains(subject_id)
    }

    pub fn retained(&self) -> &BTreeSet<String> {
        &self.retained
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Argmax pseudo-labels for every slice of every volume (inference mode, no augmentation).
pub fn estimate_pseudo_labels(
    params: &mut Parameters<f32>,
    volumes: &[Volume],
    iteration: u64,
) -> Result<PseudoLabelStore> {
    let c = (params.config.num_classes_plus_bg - 1) as u8;
    let mut store = PseudoLabelStore::new(iteration);
    for v in volumes {
        if (v.height, v.width) != params.config.input_dims {
            return Err(Error::DimMismatch(format!(
                "{} is {}x{}, network expects {:?}",
                v.subject_id, v.height, v.width, params.config.input_dims
            )));
        }
        let labels = params.predict_labels(&v.intensities, v.slices, EVAL_CHUNK)?;
        store.insert(&v.subject_id, LabelVolume::new(labels, v.slices, v.height, v.width, c)?);
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    /// 0 disables the filter.
    pub threshold: f64,
    pub num_transform_pairs: usize,
    pub rotation_deg: f64,
    pub scale: (f64, f64),
    pub translation_frac: f64,
    pub flip_prob: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            num_transform_pairs: 1,
            rotation_deg: 15.0,
            scale: (0.9, 1.1),
            translation_frac: 0.05,
            flip_prob: 0.5,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("consistency threshold must lie in [0, 1]".into()));
        }
        if self.num_transform_pairs == 0 {
            return Err(Error::Config("num_transform_pairs must be >= 1".into()));
        }
        self.transforms().validate()
    }

    /// The invertible affine + flip family used by the filter.
    pub fn transforms(&self) -> AugmentConfig {
        AugmentConfig {
            rotation_deg: self.rotation_deg,
            scale: self.scale,
            translation_frac: self.translation_frac,
            flip_prob: self.flip_prob,
            elastic_prob: 0.0,
            ..AugmentConfig::none()
        }
    }
}

/// Predicts on `t(volume)` and maps the argmax mask back through `t⁻¹`.
fn back_mapped_prediction(params: &mut Parameters<f32>, vol: &Volume, t: &GeomTransform) -> Result<Vec<u8>> {
    let (h, w) = (vol.height, vol.width);
    let inv = invert_geom(t)?;
    let mut moved = Vec::with_capacity(vol.intensities.len());
    for s in 0..vol.slices {
        moved.extend(apply_geom(vol.slice(s), h, w, t, Interp::Bilinear)?);
    }
    let pred = params.predict_labels(&moved, vol.slices, EVAL_CHUNK)?;
    let mut back = Vec::with_capacity(pred.len());
    for s in 0..vol.slices {
        back.extend(apply_geom(&pred[s * h * w..(s + 1) * h * w], h, w, &inv, Interp::Nearest)?);
    }
    Ok(back)
}

/// Agreement between predictions under two independently drawn invertible transforms,
/// each mapped back to the original frame; averaged over `num_transform_pairs` pairs.
pub fn consistency_score<R: Rng + ?Sized>(
    params: &mut Parameters<f32>,
    volume: &Volume,
    rng: &mut R,
    cfg: &ConsistencyConfig,
) -> Result<f64> {
    let family = cfg.transforms();
    let dims = (volume.height, volume.width);
    let pairs: Vec<(GeomTransform, GeomTransform)> = (0..cfg.num_transform_pairs.max(1))
        .map(|_| (sample_affine(rng, &family, dims), sample_affine(rng, &family, dims)))
        .collect();
    consistency_score_with(params, volume, &pairs)
}

/// [`consistency_score`] for explicitly given transform pairs.
pub fn consistency_score_with(
    params: &mut Parameters<f32>,
    volume: &Volume,
    pairs: &[(GeomTransform, GeomTransform)],
) -> Result<f64> {
    let c = (params.config.num_classes_plus_bg - 1) as u8;
    let mut total = 0.0;
    for (t1, t2) in pairs {
        let a = back_mapped_prediction(params, volume, t1)?;
        let b = back_mapped_prediction(params, volume, t2)?;
        total += present_class_mean_dsc(&a, &b, c)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Marks as retained the subjects scoring at least `threshold` (all subjects when 0).
/// Label contents are left untouched.
pub fn filter_by_consistency(
    store: &PseudoLabelStore,
    scores: &BTreeMap<String, f64>,
    threshold: f64,
) -> Result<PseudoLabelStore> {
    let mut out = store.clone();
    if threshold == 0.0 {
        out.retained = store.labels.keys().cloned().collect();
        return Ok(out);
    }
    let mut retained = BTreeSet::new();
    for id in store.labels.keys() {
        let s = scores
            .get(id)
            .ok_or_else(|| Error::invalid("scores", format!("no consistency score for {id}")))?;
        if *s >= threshold {
            retained.insert(id.clone());
        }
    }
    out.retained = retained;
    Ok(out)
}

/// Mean over stored subjects of the foreground-mean DSC against hidden ground truth.
/// `None` when no stored subject has ground truth.
pub fn pseudo_label_quality(store: &PseudoLabelStore, truth: &HiddenTruth) -> Option<f64> {
    let scores: Vec<f64> = store
        .labels
        .iter()
        .filter_map(|(id, pl)| {
            let gt = truth.get(id)?;
            let d = per_class_dsc(&pl.labels, &gt.labels, gt.num_classes).ok()?;
            Some(d.iter().sum::<f64>() / d.len() as f64)
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

const STORE_META: &str = "pseudo_labels.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreEntry {
    id: String,
    slices: usize,
    height: usize,
    width: usize,
    label: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreMeta {
    estimation_iteration: u64,
    num_classes: u8,
    retained: Vec<String>,
    subjects: Vec<StoreEntry>,
}

/// Writes each pseudo-label volume as raw `u8` plus `pseudo_labels.json` metadata.
pub fn save_store(dir: &Path, store: &PseudoLabelStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut subjects = Vec::new();
    let mut num_classes = 0;
    for (id, l) in &store.labels {
        let name = format!("{id}_pl.u8");
        let p = dir.join(&name);
        fs::write(&p, &l.labels).map_err(|e| Error::io(&p, e))?;
        num_classes = l.num_classes;
        subjects.push(StoreEntry {
            id: id.clone(),
            slices: l.slices,
            height: l.height,
            width: l.width,
            label: name,
        });
    }
    let meta = StoreMeta {
        estimation_iteration: store.estimation_iteration,
        num_classes,
        retained: store.retained.iter().cloned().collect(),
        subjects,
    };
    let p = dir.join(STORE_META);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn load_store(dir: &Path) -> Result<PseudoLabelStore> {
    let p = dir.join(STORE_META);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: StoreMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let mut store = PseudoLabelStore::new(meta.estimation_iteration);
    for s in meta.subjects {
        let lp = dir.join(&s.label);
        let raw = fs::read(&lp).map_err(|e| Error::io(&lp, e))?;
        store
            .labels
            .insert(s.id, LabelVolume::new(raw, s.slices, s.height, s.width, meta.num_classes)?);
    }
    for id in meta.retained {
        if !store.labels.contains_key(&id) {
            return Err(Error::Format {
                path: p,
                reason: format!("retained subject {id} has no labels"),
            });
        }
        store.retained.insert(id);
    }
    Ok(store)
}
