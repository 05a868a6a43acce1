//! Two-phase training: supervised warm-up on the labeled volumes, then pseudo-label
//! windows in one of four modes, with periodic validation and best-model selection.

pub mod experiment;
pub mod metrics;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_geom, apply_intensity, sample_geom, sample_intensity, AugmentConfig, Interp};
use crate::dataset::{sample_slice_batch, DatasetSplit, HiddenTruth, SliceBatch};
use crate::error::{Error, Result};
use crate::evaluate::evaluate_model;
use crate::losses::{contrastive_batch_loss_eps, dice_loss_grad, ContrastiveConfig, Provenance};
use crate::network::{Group, Mode, NetworkConfig, Parameters};
use crate::optim::{Adam, AdamConfig};
use crate::pseudolabel::{
    consistency_score, estimate_pseudo_labels, filter_by_consistency, pseudo_label_quality, ConsistencyConfig,
    PseudoLabelStore,
};
use crate::tensor::Tensor;
pub use metrics::MetricRecord;

/// Added to vector norms inside the cosine similarity during training, so a pixel whose
/// representation collapses to zero does not abort the run.
pub const TRAIN_NORM_EPS: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Dice on labeled slices, contrastive loss on labeled and pseudo-labeled slices.
    Proposed,
    /// Dice on labeled and pseudo-labeled slices; no contrastive loss.
    SelfTraining,
    /// Dice on labeled and pseudo-labeled slices plus the contrastive loss.
    JointPlSeg,
    /// Phase-1 regime throughout; no unlabeled data.
    Baseline,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::Baseline,
        TrainMode::SelfTraining,
        TrainMode::Proposed,
        TrainMode::JointPlSeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Proposed => "proposed",
            TrainMode::SelfTraining => "self_training",
            TrainMode::JointPlSeg => "joint_pl_seg",
            TrainMode::Baseline => "baseline",
        }
    }

    fn pseudo_in_seg(self) -> bool {
        matches!(self, TrainMode::SelfTraining | TrainMode::JointPlSeg)
    }

    fn has_contrastive(self) -> bool {
        matches!(self, TrainMode::Proposed | TrainMode::JointPlSeg)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub phase1_iters: u64,
    pub phase2_iters: u64,
    /// Iterations per pseudo-label window (P).
    pub refresh_period: u64,
    pub num_pseudo_steps: usize,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub adam: AdamConfig,
    pub contrastive: ContrastiveConfig,
    pub consistency: ConsistencyConfig,
    pub augment: AugmentConfig,
    pub validation_period: u64,
    /// Clears all Adam moments at every refresh after the first.
    pub reset_optimizer_on_refresh: bool,
    /// Feed the contrastive branch the segmentation-branch view (geometric + intensity)
    /// instead of an intensity-only view of the raw slice.
    pub share_seg_view: bool,
    /// Set from the experiment-level seed, never from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            mode: TrainMode::Proposed,
            phase1_iters: 5000,
            phase2_iters: 15000,
            refresh_period: 5000,
            num_pseudo_steps: 3,
            batch_size: 20,
            labeled_per_batch: 10,
            adam: AdamConfig::default(),
            contrastive: ContrastiveConfig::default(),
            consistency: ConsistencyConfig::default(),
            augment: AugmentConfig::default(),
            validation_period: 500,
            reset_optimizer_on_refresh: false,
            share_seg_view: false,
            seed: 0,
        }
    }

    /// Single-core sized schedule: 600 warm-up iterations, three 600-iteration windows,
    /// batches of 4 labeled + 4 unlabeled slices.
    pub fn desk() -> Self {
        Self {
            phase1_iters: 600,
            phase2_iters: 1800,
            refresh_period: 600,
            batch_size: 8,
            labeled_per_batch: 4,
            validation_period: 100,
            ..Self::paper()
        }
    }

    /// Copy set up for `mode`; baseline batches become all-labeled.
    pub fn with_mode(&self, mode: TrainMode) -> Self {
        let mut c = self.clone();
        c.mode = mode;
        if mode == TrainMode::Baseline {
            c.labeled_per_batch = c.batch_size;
        }
        c
    }

    pub fn unlabeled_per_batch(&self) -> usize {
        self.batch_size.saturating_sub(self.labeled_per_batch)
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 stays legal: it is the documented null-step configuration.
        if !(self.adam.learning_rate >= 0.0 && self.adam.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        if self.batch_size == 0 || self.labeled_per_batch == 0 || self.labeled_per_batch > self.batch_size {
            return Err(Error::Config(format!(
                "need 1 <= labeled_per_batch ({}) <= batch_size ({})",
                self.labeled_per_batch, self.batch_size
            )));
        }
        if self.mode == TrainMode::Baseline && self.unlabeled_per_batch() > 0 {
            return Err(Error::Config(format!(
                "baseline mode uses no unlabeled slices, but batch_size - labeled_per_batch = {}",
                self.unlabeled_per_batch()
            )));
        }
        if self.refresh_period == 0 || self.num_pseudo_steps == 0 || self.validation_period == 0 {
            return Err(Error::Config(
                "refresh_period, num_pseudo_steps and validation_period must be >= 1".into(),
            ));
        }
        self.contrastive.validate()?;
        self.consistency.validate()?;
        self.augment.validate()?;
        if self.phase2_iters != self.num_pseudo_steps as u64 * self.refresh_period {
            log::warn!(
                "phase2_iters ({}) != num_pseudo_steps ({}) x refresh_period ({})",
                self.phase2_iters,
                self.num_pseudo_steps,
                self.refresh_period
            );
        }
        Ok(())
    }

    /// Phase-2 iterations (counted from 0) at which pseudo-labels are re-estimated.
    pub fn refresh_iterations(&self) -> Vec<u64> {
        (0..self.num_pseudo_steps as u64)
            .map(|k| k * self.refresh_period)
            .filter(|&i| i < self.phase2_iters)
            .collect()
    }
}

/// Independent RNG streams, one per consumer, so that e.g. drawing unlabeled slices never
/// shifts the labeled slice sequence.
#[derive(Debug, Clone)]
struct Streams {
    labeled: ChaCha8Rng,
    unlabeled: ChaCha8Rng,
    seg_aug: ChaCha8Rng,
    pseudo_aug: ChaCha8Rng,
    cont_aug: ChaCha8Rng,
    cont_sample: ChaCha8Rng,
    consistency: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(16 + k);
            r
        };
        Self {
            labeled: s(0),
            unlabeled: s(1),
            seg_aug: s(2),
            pseudo_aug: s(3),
            cont_aug: s(4),
            cont_sample: s(5),
            consistency: s(6),
        }
    }
}

/// Counts of what every loss invocation was fed, by slice provenance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossAudit {
    pub dice_calls: u64,
    pub dice_calls_with_pseudo: u64,
    pub dice_pseudo_slices: u64,
    pub contrastive_calls: u64,
    pub contrastive_pseudo_slices: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestCheckpoint {
    pub iteration: u64,
    pub dsc: f64,
    pub params: Parameters<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: u64,
    pub dsc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: Parameters<f32>,
    pub optimizer: Adam<f32>,
    /// Parameter updates performed so far, over both phases.
    pub iteration: u64,
    pub pseudo_store: Option<PseudoLabelStore>,
    pub best_val_dsc: Option<f64>,
    pub best: Option<BestCheckpoint>,
    pub validations: Vec<ValidationPoint>,
    pub metrics: Vec<MetricRecord>,
    pub audit: LossAudit,
    streams: Streams,
}

impl TrainState {
    pub fn new(network: &NetworkConfig, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self::from_params(Parameters::init(network, cfg.seed)?, cfg))
    }

    /// Starts from given parameters (e.g. a loaded checkpoint).
    pub fn from_params(params: Parameters<f32>, cfg: &TrainConfig) -> Self {
        Self {
            params,
            optimizer: Adam::new(cfg.adam),
            iteration: 0,
            pseudo_store: None,
            best_val_dsc: None,
            best: None,
            validations: Vec::new(),
            metrics: Vec::new(),
            audit: LossAudit::default(),
            streams: Streams::new(cfg.seed),
        }
    }
}

/// Receives every refreshed (and filtered) pseudo-label store.
pub trait PseudoLabelObserver {
    fn on_refresh(&mut self, step: usize, store: &PseudoLabelStore);
}

impl PseudoLabelObserver for () {
    fn on_refresh(&mut self, _: usize, _: &PseudoLabelStore) {}
}

/// Diagnostics-only observer scoring each refresh against hidden ground truth.
pub struct QualityTracker<'a> {
    truth: &'a HiddenTruth,
    pub history: Vec<(usize, Option<f64>)>,
}

impl<'a> QualityTracker<'a> {
    pub fn new(truth: &'a HiddenTruth) -> Self {
        Self {
            truth,
            history: Vec::new(),
        }
    }
}

impl PseudoLabelObserver for QualityTracker<'_> {
    fn on_refresh(&mut self, step: usize, store: &PseudoLabelStore) {
        self.history.push((step, pseudo_label_quality(store, self.truth)));
    }
}

/// Geometric + intensity augmentation of an (image, label) pair.
fn geom_view(
    img: &[f32],
    lab: &[u8],
    dims: (usize, usize),
    aug: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<u8>)> {
    let (h, w) = dims;
    let t = sample_geom(rng, aug, dims);
    let it = sample_intensity(rng, aug);
    let im = apply_geom(img, h, w, &t, Interp::Bilinear)?;
    let lb = apply_geom(lab, h, w, &t, Interp::Nearest)?;
    Ok((apply_intensity(&im, &it), lb))
}

fn dice_step(
    state: &mut TrainState,
    images: Vec<f32>,
    labels: &[u8],
    provenance: &[Provenance],
    dims: (usize, usize),
) -> Result<f64> {
    let n = provenance.len();
    let pseudo = provenance.iter().filter(|p| **p == Provenance::Pseudo).count() as u64;
    state.audit.dice_calls += 1;
    state.audit.dice_pseudo_slices += pseudo;
    state.audit.dice_calls_with_pseudo += (pseudo > 0) as u64;
    let x = Tensor::from_vec(images, n, 1, dims.0, dims.1);
    let (probs, cache) = state.params.forward_seg(&x, Mode::Train)?;
    let (loss, grad) = dice_loss_grad(&probs, labels)?;
    state.params.backward_seg(cache.as_ref().expect("train mode keeps a cache"), &grad);
    Ok(loss as f64)
}

fn contrastive_step(
    state: &mut TrainState,
    images: Vec<f32>,
    labels: &[u8],
    provenance: &[Provenance],
    dims: (usize, usize),
    cfg: &TrainConfig,
) -> Result<f64> {
    let n = provenance.len();
    state.audit.contrastive_calls += 1;
    state.audit.contrastive_pseudo_slices += provenance.iter().filter(|p| **p == Provenance::Pseudo).count() as u64;
    let c = state.params.config.num_classes_plus_bg - 1;
    let x = Tensor::from_vec(images, n, 1, dims.0, dims.1);
    let (z, cache) = state.params.forward_contrastive(&x, Mode::Train)?;
    let out = contrastive_batch_loss_eps(
        &z,
        labels,
        c,
        &cfg.contrastive,
        &mut state.streams.cont_sample,
        true,
        TRAIN_NORM_EPS,
    )?;
    let mut grad = out.grad.expect("gradient requested");
    let lambda = cfg.contrastive.lambda_cont as f32;
    grad.data.iter_mut().for_each(|g| *g *= lambda);
    state
        .params
        .backward_contrastive(cache.as_ref().expect("train mode keeps a cache"), &grad);
    Ok(out.value as f64)
}

fn validate_if_due(state: &mut TrainState, split: &DatasetSplit, cfg: &TrainConfig, phase_end: bool) -> Result<()> {
    if split.validation.is_empty() || !(phase_end || state.iteration % cfg.validation_period == 0) {
        return Ok(());
    }
    if state.validations.last().is_some_and(|v| v.iteration == state.iteration) {
        return Ok(());
    }
    let report = evaluate_model(&mut state.params, &split.validation)?;
    let dsc = report.foreground_mean;
    state.validations.push(ValidationPoint {
        iteration: state.iteration,
        dsc,
    });
    if state.best_val_dsc.is_none_or(|b| dsc > b) {
        state.best_val_dsc = Some(dsc);
        state.best = Some(BestCheckpoint {
            iteration: state.iteration,
            dsc,
            params: state.params.clone(),
        });
    }
    state.metrics.push(MetricRecord::Validation {
        iteration: state.iteration,
        dsc,
        per_structure: report.per_structure,
        best: state.best_val_dsc.unwrap_or(dsc),
    });
    log::debug!("iteration {}: validation DSC {dsc:.4}", state.iteration);
    Ok(())
}

fn finish_iteration(
    state: &mut TrainState,
    phase: u8,
    (seg, cont): (f64, f64),
    cfg: &TrainConfig,
    batch: &SliceBatch,
    groups: &[Group],
) -> Result<()> {
    let total = seg + cfg.contrastive.lambda_cont * cont;
    if !total.is_finite() {
        return Err(Error::Diverged(state.iteration + 1));
    }
    state.optimizer.step(&mut state.params, groups);
    state.iteration += 1;
    let pseudo = batch.provenance.iter().filter(|p| **p == Provenance::Pseudo).count();
    state.metrics.push(MetricRecord::Iter {
        phase,
        iteration: state.iteration,
        seg,
        cont,
        total,
        labeled: batch.len() - pseudo,
        pseudo,
    });
    Ok(())
}

const SEG_GROUPS: [Group; 2] = [Group::Backbone, Group::SegHead];

fn contrastive_active(cfg: &TrainConfig) -> bool {
    cfg.mode.has_contrastive() && cfg.contrastive.lambda_cont != 0.0
}

/// Phase 1 from freshly initialized parameters.
pub fn train_phase1(split: &DatasetSplit, network: &NetworkConfig, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    train_phase1_from(TrainState::new(network, cfg)?, split, cfg)
}

/// `phase1_iters` Dice-only updates of (θ, ξ) on augmented all-labeled batches.
pub fn train_phase1_from(mut state: TrainState, split: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::EmptyPool("labeled volumes"));
    }
    let dims = state.params.config.input_dims;
    let end = state.iteration + cfg.phase1_iters;
    while state.iteration < end {
        let batch = labeled_batch(&mut state, split, cfg.batch_size)?;
        let seg = labeled_seg_pass(&mut state, &batch, dims, &cfg.augment)?;
        finish_iteration(&mut state, 1, (seg, 0.0), cfg, &batch, &SEG_GROUPS)?;
        let last = state.iteration == end;
        validate_if_due(&mut state, split, cfg, last)?;
    }
    Ok(state)
}

fn labeled_batch(state: &mut TrainState, split: &DatasetSplit, n: usize) -> Result<SliceBatch> {
    let Streams { labeled, unlabeled, .. } = &mut state.streams;
    sample_slice_batch(split, None, n, 0, labeled, unlabeled)
}

fn labeled_seg_pass(state: &mut TrainState, batch: &SliceBatch, dims: (usize, usize), aug: &AugmentConfig) -> Result<f64> {
    state.params.zero_grad();
    let mut images = Vec::with_capacity(batch.images.len());
    let mut labels = Vec::with_capacity(batch.labels.len());
    for i in 0..batch.len() {
        let (im, lb) = geom_view(batch.image(i), batch.label(i), dims, aug, &mut state.streams.seg_aug)?;
        images.extend(im);
        labels.extend(lb);
    }
    dice_step(state, images, &labels, &batch.provenance, dims)
}

fn refresh(
    state: &mut TrainState,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    step: usize,
    estimation_iteration: u64,
    observer: &mut dyn PseudoLabelObserver,
) -> Result<()> {
    if step > 0 && cfg.reset_optimizer_on_refresh {
        for g in Group::ALL {
            state.optimizer.reset_group(g);
        }
    }
    let store = estimate_pseudo_labels(&mut state.params, &split.unlabeled, estimation_iteration)?;
    let (store, mean_consistency) = if cfg.consistency.threshold > 0.0 {
        let mut scores = std::collections::BTreeMap::new();
        for v in &split.unlabeled {
            let s = consistency_score(&mut state.params, v, &mut state.streams.consistency, &cfg.consistency)?;
            scores.insert(v.subject_id.clone(), s);
        }
        let mean = scores.values().sum::<f64>() / scores.len().max(1) as f64;
        (filter_by_consistency(&store, &scores, cfg.consistency.threshold)?, Some(mean))
    } else {
        (filter_by_consistency(&store, &Default::default(), 0.0)?, None)
    };
    state.metrics.push(MetricRecord::Refresh {
        iteration: state.iteration,
        estimation_iteration,
        step,
        stored: store.len(),
        retained: store.retained().len(),
        mean_consistency,
    });
    observer.on_refresh(step, &store);
    state.pseudo_store = Some(store);
    Ok(())
}

/// Seed of the fresh contrastive head drawn at the start of phase 2.
fn phase2_head_seed(seed: u64) -> u64 {
    seed ^ 0x7068_6932
}

/// Phase 2: `num_pseudo_steps` windows of `refresh_period` iterations, pseudo-labels
/// re-estimated (and filtered) at the start of each window. The contrastive head is
/// re-initialized first.
pub fn train_phase2(
    split: &DatasetSplit,
    mut state: TrainState,
    cfg: &TrainConfig,
    observer: &mut dyn PseudoLabelObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    if split.labeled.is_empty() {
        return Err(Error::EmptyPool("labeled volumes"));
    }
    let n_u = cfg.unlabeled_per_batch();
    if cfg.mode != TrainMode::Baseline && n_u > 0 && split.unlabeled.is_empty() {
        return Err(Error::EmptyPool("unlabeled volumes"));
    }
    state.params.reinit_contrastive_head(phase2_head_seed(cfg.seed));
    state.optimizer.reset_group(Group::ContrastiveHead);
    state.optimizer.config = cfg.adam;
    let dims = state.params.config.input_dims;
    let refreshes = cfg.refresh_iterations();
    let start = state.iteration;
    for k in 0..cfg.phase2_iters {
        if cfg.mode != TrainMode::Baseline {
            if let Some(step) = refreshes.iter().position(|&r| r == k) {
                refresh(&mut state, split, cfg, step, k, observer)?;
            }
        }
        if cfg.mode == TrainMode::Baseline {
            let batch = labeled_batch(&mut state, split, cfg.labeled_per_batch)?;
            let seg = labeled_seg_pass(&mut state, &batch, dims, &cfg.augment)?;
            finish_iteration(&mut state, 2, (seg, 0.0), cfg, &batch, &SEG_GROUPS)?;
        } else {
            phase2_iteration(&mut state, split, cfg, dims)?;
        }
        let last = state.iteration == start + cfg.phase2_iters;
        validate_if_due(&mut state, split, cfg, last)?;
    }
    Ok(state)
}

fn phase2_iteration(state: &mut TrainState, split: &DatasetSplit, cfg: &TrainConfig, dims: (usize, usize)) -> Result<()> {
    let n_l = cfg.labeled_per_batch;
    let n_u = cfg.unlabeled_per_batch();
    let batch = {
        let Streams { labeled, unlabeled, .. } = &mut state.streams;
        sample_slice_batch(split, state.pseudo_store.as_ref(), n_l, n_u, labeled, unlabeled)?
    };
    let cont_on = contrastive_active(cfg);
    let pseudo_views = cfg.mode.pseudo_in_seg() || (cont_on && cfg.share_seg_view);

    // Segmentation-branch views; pseudo-labeled slices draw from their own stream.
    let mut views: Vec<Option<(Vec<f32>, Vec<u8>)>> = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let v = match batch.provenance[i] {
            Provenance::GroundTruth => Some(geom_view(
                batch.image(i),
                batch.label(i),
                dims,
                &cfg.augment,
                &mut state.streams.seg_aug,
            )?),
            Provenance::Pseudo if pseudo_views => Some(geom_view(
                batch.image(i),
                batch.label(i),
                dims,
                &cfg.augment,
                &mut state.streams.pseudo_aug,
            )?),
            _ => None,
        };
        views.push(v);
    }

    state.params.zero_grad();
    let seg_idx: Vec<usize> = (0..batch.len())
        .filter(|&i| match batch.provenance[i] {
            Provenance::GroundTruth => true,
            Provenance::Pseudo => cfg.mode.pseudo_in_seg(),
            Provenance::None => false,
        })
        .collect();
    let mut images = Vec::with_capacity(seg_idx.len() * dims.0 * dims.1);
    let mut labels = Vec::with_capacity(seg_idx.len() * dims.0 * dims.1);
    let mut prov = Vec::with_capacity(seg_idx.len());
    for &i in &seg_idx {
        let (im, lb) = views[i].as_ref().expect("segmentation slices have a view");
        images.extend_from_slice(im);
        labels.extend_from_slice(lb);
        prov.push(batch.provenance[i]);
    }
    let seg = dice_step(state, images, &labels, &prov, dims)?;

    let cont = if cont_on {
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.provenance[i].has_labels()).collect();
        let mut images = Vec::with_capacity(idx.len() * dims.0 * dims.1);
        let mut labels = Vec::with_capacity(idx.len() * dims.0 * dims.1);
        let mut prov = Vec::with_capacity(idx.len());
        for &i in &idx {
            if cfg.share_seg_view {
                let (im, lb) = views[i].as_ref().expect("shared views exist for every labeled slice");
                images.extend_from_slice(im);
                labels.extend_from_slice(lb);
            } else {
                let it = sample_intensity(&mut state.streams.cont_aug, &cfg.augment);
                images.extend(apply_intensity(batch.image(i), &it));
                labels.extend_from_slice(batch.label(i));
            }
            prov.push(batch.provenance[i]);
        }
        contrastive_step(state, images, &labels, &prov, dims, cfg)?
    } else {
        0.0
    };
    let groups: &[Group] = if cont_on { &Group::ALL } else { &SEG_GROUPS };
    finish_iteration(state, 2, (seg, cont), cfg, &batch, groups)
}

/// Index of the highest validation DSC; ties go to the earliest.
pub fn best_validation_index(dscs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &d) in dscs.iter().enumerate() {
        if best.is_none_or(|b| d > dscs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Parameters of the checkpoint with the highest validation DSC (earliest on ties).
pub fn select_best_model(state: &TrainState) -> Result<Parameters<f32>> {
    state.best.as_ref().map(|b| b.params.clone()).ok_or(Error::NoValidation)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_index_prefers_earliest_maximum() {
        assert_eq!(best_validation_index(&[0.5, 0.8, 0.7]), Some(1));
        assert_eq!(best_validation_index(&[0.4]), Some(0));
        assert_eq!(best_validation_index(&[0.1, 0.2, 0.3]), Some(2));
        assert_eq!(best_validation_index(&[0.6, 0.6]), Some(0));
        assert_eq!(best_validation_index(&[]), None);
    }

    #[test]
    fn refresh_schedule() {
        let c = TrainConfig::paper();
        assert_eq!(c.refresh_iterations(), vec![0, 5000, 10000]);
        let d = TrainConfig::desk();
        assert_eq!(d.refresh_iterations(), vec![0, 600, 1200]);
    }

    #[test]
    fn config_contracts() {
        assert!(TrainConfig::paper().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let mut c = TrainConfig::desk();
        c.mode = TrainMode::Baseline;
        assert!(c.validate().is_err());
        assert!(TrainConfig::desk().with_mode(TrainMode::Baseline).validate().is_ok());
        c = TrainConfig::desk();
        c.labeled_per_batch = 9;
        assert!(c.validate().is_err());
        c = TrainConfig::desk();
        c.adam.learning_rate = -1e-3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
        assert!("mixup".parse::<TrainMode>().is_err());
    }
}
