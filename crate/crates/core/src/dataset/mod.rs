//! Volumes, label volumes, dataset splits and slice batches.

mod io;
mod synthetic;

pub use io::{load_dataset, save_dataset, DatasetEntry, Manifest, SubjectEntry, MANIFEST_NAME};
pub use synthetic::{default_intensity_ranges, generate_synthetic_dataset, ShapeJitter, SyntheticSpec};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
pub use crate::losses::Provenance;
use crate::pseudolabel::PseudoLabelStore;

/// A stack of 2D slices with in-plane spacing in mm per pixel (row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub intensities: Vec<f32>,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub spacing: (f64, f64),
    pub subject_id: String,
}

impl Volume {
    pub fn new(
        intensities: Vec<f32>,
        slices: usize,
        height: usize,
        width: usize,
        spacing: (f64, f64),
        subject_id: impl Into<String>,
    ) -> Result<Self> {
        let v = Self {
            intensities,
            slices,
            height,
            width,
            spacing,
            subject_id: subject_id.into(),
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("volume", "empty dimensions"));
        }
        if self.intensities.len() != self.slices * self.height * self.width {
            return Err(Error::DimMismatch(format!(
                "{}: {} intensities for {}x{}x{}",
                self.subject_id,
                self.intensities.len(),
                self.slices,
                self.height,
                self.width
            )));
        }
        if !(self.spacing.0 > 0.0 && self.spacing.1 > 0.0) {
            return Err(Error::invalid("spacing", "components must be > 0"));
        }
        if self.intensities.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("intensities", "non-finite value"));
        }
        Ok(())
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, s: usize) -> &[f32] {
        let p = self.plane();
        &self.intensities[s * p..(s + 1) * p]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    pub labels: Vec<u8>,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: u8,
}

impl LabelVolume {
    pub fn new(labels: Vec<u8>, slices: usize, height: usize, width: usize, num_classes: u8) -> Result<Self> {
        let v = Self {
            labels,
            slices,
            height,
            width,
            num_classes,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.slices * self.height * self.width {
            return Err(Error::DimMismatch(format!(
                "{} labels for {}x{}x{}",
                self.labels.len(),
                self.slices,
                self.height,
                self.width
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l > self.num_classes) {
            return Err(Error::LabelOutOfRange {
                value: bad,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn matches(&self, v: &Volume) -> bool {
        (self.slices, self.height, self.width) == (v.slices, v.height, v.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn slice(&self, s: usize) -> &[u8] {
        let p = self.plane();
        &self.labels[s * p..(s + 1) * p]
    }
}

pub type LabeledVolume = (Volume, LabelVolume);

/// Ground truth of unlabeled volumes, kept apart from the split handed to training.
#[derive(Debug, Clone, Default)]
pub struct HiddenTruth {
    labels: BTreeMap<String, LabelVolume>,
}

impl HiddenTruth {
    pub fn get(&self, subject_id: &str) -> Option<&LabelVolume> {
        self.labels.get(subject_id)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<LabeledVolume>,
    pub unlabeled: Vec<Volume>,
    pub validation: Vec<LabeledVolume>,
    pub test: Vec<LabeledVolume>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn subject_ids(&self) -> [Vec<&str>; 4] {
        fn ids(v: &[LabeledVolume]) -> Vec<&str> {
            v.iter().map(|(x, _)| x.subject_id.as_str()).collect()
        }
        [
            ids(&self.labeled),
            self.unlabeled.iter().map(|x| x.subject_id.as_str()).collect(),
            ids(&self.validation),
            ids(&self.test),
        ]
    }

    pub fn num_classes(&self) -> u8 {
        self.labeled
            .iter()
            .chain(&self.validation)
            .chain(&self.test)
            .map(|(_, l)| l.num_classes)
            .next()
            .unwrap_or(0)
    }
}

fn check_counts(available: usize, n_labeled: usize, n_val: usize, n_test: usize) -> Result<()> {
    let requested = n_labeled + n_val + n_test;
    if requested > available {
        return Err(Error::InsufficientVolumes { requested, available });
    }
    Ok(())
}

fn assemble(
    dataset: &[LabeledVolume],
    labeled: &[usize],
    val: &[usize],
    test: &[usize],
    unlabeled: &[usize],
    seed: u64,
) -> (DatasetSplit, HiddenTruth) {
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut hidden = HiddenTruth::default();
    for &i in unlabeled {
        hidden.labels.insert(dataset[i].0.subject_id.clone(), dataset[i].1.clone());
    }
    let split = DatasetSplit {
        labeled: pick(labeled),
        unlabeled: unlabeled.iter().map(|&i| dataset[i].0.clone()).collect(),
        validation: pick(val),
        test: pick(test),
        seed,
    };
    (split, hidden)
}

/// Random disjoint split: `n_labeled` labeled, `n_val` validation and `n_test` test volumes,
/// the rest unlabeled with their labels moved into the returned [`HiddenTruth`].
pub fn make_split(
    dataset: &[LabeledVolume],
    n_labeled: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<(DatasetSplit, HiddenTruth)> {
    check_counts(dataset.len(), n_labeled, n_val, n_test)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (labeled, rest) = order.split_at(n_labeled);
    let (val, rest) = rest.split_at(n_val);
    let (test, unlabeled) = rest.split_at(n_test);
    Ok(assemble(dataset, labeled, val, test, unlabeled, seed))
}

/// Split for one run of a multi-run experiment: the test set is drawn once from
/// `partition_seed` and stays fixed across runs; labeled and validation volumes are drawn
/// from the remaining pool with `run_seed`, and whatever is left is unlabeled.
pub fn make_run_split(
    dataset: &[LabeledVolume],
    n_labeled: usize,
    n_val: usize,
    n_test: usize,
    partition_seed: u64,
    run_seed: u64,
) -> Result<(DatasetSplit, HiddenTruth)> {
    check_counts(dataset.len(), n_labeled, n_val, n_test)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(partition_seed));
    let (test, pool) = order.split_at(n_test);
    let mut pool = pool.to_vec();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(run_seed));
    let (labeled, rest) = pool.split_at(n_labeled);
    let (val, unlabeled) = rest.split_at(n_val);
    Ok(assemble(dataset, labeled, val, test, unlabeled, run_seed))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SliceRef {
    pub subject_id: String,
    pub slice: usize,
}

/// 2D slices with one label map per slice (all zeros when the provenance is `None`).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceBatch {
    pub height: usize,
    pub width: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub provenance: Vec<Provenance>,
    pub sources: Vec<SliceRef>,
}

impl SliceBatch {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.plane();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn label(&self, i: usize) -> &[u8] {
        let p = self.plane();
        &self.labels[i * p..(i + 1) * p]
    }

    fn push(&mut self, img: &[f32], lab: Option<&[u8]>, prov: Provenance, src: SliceRef) {
        self.images.extend_from_slice(img);
        match lab {
            Some(l) => self.labels.extend_from_slice(l),
            None => self.labels.extend(std::iter::repeat_n(0, img.len())),
        }
        self.provenance.push(prov);
        self.sources.push(src);
    }
}

/// Picks `(volume, slice)` uniformly over all slices of `sizes`.
fn draw_slice<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> (usize, usize) {
    let total: usize = sizes.iter().sum();
    let mut k = rng.random_range(0..total);
    for (v, &s) in sizes.iter().enumerate() {
        if k < s {
            return (v, k);
        }
        k -= s;
    }
    unreachable!("index within total")
}

/// Samples `n_labeled_slices` labeled slices followed by `n_unlabeled_slices` unlabeled ones,
/// uniformly with replacement over `(volume, slice)` pairs of each pool.
///
/// Unlabeled slices come only from volumes retained in `pseudo_store` and carry their
/// pseudo-labels. Each pool consumes its own `rng`.
pub fn sample_slice_batch<R: Rng + ?Sized>(
    split: &DatasetSplit,
    pseudo_store: Option<&PseudoLabelStore>,
    n_labeled_slices: usize,
    n_unlabeled_slices: usize,
    labeled_rng: &mut R,
    unlabeled_rng: &mut R,
) -> Result<SliceBatch> {
    if n_labeled_slices + n_unlabeled_slices == 0 {
        return Err(Error::EmptyPool("requested batch is empty"));
    }
    let (h, w) = split
        .labeled
        .first()
        .map(|(v, _)| (v.height, v.width))
        .or_else(|| split.unlabeled.first().map(|v| (v.height, v.width)))
        .ok_or(Error::EmptyPool("dataset split"))?;
    let mut batch = SliceBatch {
        height: h,
        width: w,
        images: Vec::with_capacity((n_labeled_slices + n_unlabeled_slices) * h * w),
        labels: Vec::with_capacity((n_labeled_slices + n_unlabeled_slices) * h * w),
        provenance: Vec::new(),
        sources: Vec::new(),
    };
    if n_labeled_slices > 0 {
        if split.labeled.is_empty() {
            return Err(Error::EmptyPool("labeled volumes"));
        }
        let sizes: Vec<usize> = split.labeled.iter().map(|(v, _)| v.slices).collect();
        for _ in 0..n_labeled_slices {
            let (vi, s) = draw_slice(&sizes, labeled_rng);
            let (v, l) = &split.labeled[vi];
            let src = SliceRef {
                subject_id: v.subject_id.clone(),
                slice: s,
            };
            batch.push(v.slice(s), Some(l.slice(s)), Provenance::GroundTruth, src);
        }
    }
    if n_unlabeled_slices > 0 {
        let store = pseudo_store.ok_or(Error::EmptyPool("pseudo-label store"))?;
        let pool: Vec<(&Volume, &LabelVolume)> = split
            .unlabeled
            .iter()
            .filter(|v| store.is_retained(&v.subject_id))
            .filter_map(|v| store.get(&v.subject_id).map(|l| (v, l)))
            .collect();
        if pool.is_empty() {
            return Err(Error::EmptyPool("retained unlabeled volumes"));
        }
        let sizes: Vec<usize> = pool.iter().map(|(v, _)| v.slices).collect();
        for _ in 0..n_unlabeled_slices {
            let (vi, s) = draw_slice(&sizes, unlabeled_rng);
            let (v, l) = pool[vi];
            let src = SliceRef {
                subject_id: v.subject_id.clone(),
                slice: s,
            };
            batch.push(v.slice(s), Some(l.slice(s)), Provenance::Pseudo, src);
        }
    }
    for (i, v) in batch.images.chunks(h * w).enumerate() {
        if v.len() != h * w {
            return Err(Error::DimMismatch(format!("slice {i} has a different size")));
        }
    }
    Ok(batch)
}
