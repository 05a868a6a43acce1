//! Multi-run experiments: per run, resample the labeled/validation volumes, train every
//! requested mode from a shared phase-1 state and score the best model on the test set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{select_best_model, train_phase1, train_phase2, LossAudit, MetricRecord, QualityTracker, TrainConfig, TrainMode};
use crate::dataset::{make_run_split, LabeledVolume};
use crate::error::{Error, Result};
use crate::evaluate::{aggregate_runs, evaluate_model, EvalReport, RunSummary};
use crate::network::NetworkConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub modes: Vec<TrainMode>,
    pub n_labeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fixes the test set across runs.
    pub partition_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: TrainMode,
    pub run: usize,
    pub seed: u64,
    pub labeled_ids: Vec<String>,
    pub test: EvalReport,
    pub best_iteration: u64,
    pub best_val_dsc: f64,
    /// Pseudo-label DSC against hidden truth after each refresh.
    pub pseudo_quality: Vec<Option<f64>>,
    pub audit: LossAudit,
    #[serde(skip)]
    pub metrics: Vec<MetricRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: TrainMode,
    pub n_labeled: usize,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<ModeSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, mode: TrainMode) -> Option<&RunSummary> {
        self.summaries.iter().find(|s| s.mode == mode).map(|s| &s.summary)
    }
}

/// Seed of run `r`: the configured seed plus `r`.
pub fn run_seed(base: u64, run: usize) -> u64 {
    base.wrapping_add(run as u64)
}

pub fn run_experiment(dataset: &[LabeledVolume], plan: &ExperimentPlan, n_runs: usize) -> Result<ExperimentResult> {
    if n_runs == 0 {
        return Err(Error::invalid("n_runs", "must be >= 1"));
    }
    if plan.modes.is_empty() {
        return Err(Error::invalid("modes", "need at least one mode"));
    }
    if plan.n_test == 0 {
        return Err(Error::invalid("n_test", "need test volumes to score"));
    }
    let mut runs = Vec::new();
    for r in 0..n_runs {
        let seed = run_seed(plan.train.seed, r);
        let (split, truth) = make_run_split(
            dataset,
            plan.n_labeled,
            plan.n_val,
            plan.n_test,
            plan.partition_seed,
            seed,
        )?;
        let base = TrainConfig {
            seed,
            ..plan.train.clone()
        };
        log::info!("run {r} (seed {seed}): phase 1");
        let phase1 = train_phase1(&split, &plan.network, &base)?;
        for &mode in &plan.modes {
            let cfg = base.with_mode(mode);
            log::info!("run {r} (seed {seed}): phase 2, {mode}");
            let mut tracker = QualityTracker::new(&truth);
            let state = train_phase2(&split, phase1.clone(), &cfg, &mut tracker)?;
            let mut best = select_best_model(&state)?;
            let mut test = evaluate_model(&mut best, &split.test)?;
            test.seed = Some(seed);
            test.config = serde_json::to_value(&cfg).expect("config serializes");
            let b = state.best.as_ref().expect("selected model exists");
            log::info!("run {r} {mode}: test DSC {:.4}", test.foreground_mean);
            runs.push(RunResult {
                mode,
                run: r,
                seed,
                labeled_ids: split.labeled.iter().map(|(v, _)| v.subject_id.clone()).collect(),
                best_iteration: b.iteration,
                best_val_dsc: b.dsc,
                test,
                pseudo_quality: tracker.history.iter().map(|(_, q)| *q).collect(),
                audit: state.audit,
                metrics: state.metrics,
            });
        }
    }
    let mut summaries = Vec::new();
    for &mode in &plan.modes {
        let reports: Vec<EvalReport> = runs.iter().filter(|r| r.mode == mode).map(|r| r.test.clone()).collect();
        summaries.push(ModeSummary {
            mode,
            n_labeled: plan.n_labeled,
            summary: aggregate_runs(&reports)?,
        });
    }
    Ok(ExperimentResult { runs, summaries })
}

/// Rows = modes, columns = labeled-volume counts; cells `mean ± std (runs)`.
pub fn summary_table(rows: &[ModeSummary]) -> String {
    let mut modes: Vec<TrainMode> = rows.iter().map(|r| r.mode).collect();
    modes.sort();
    modes.dedup();
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.n_labeled).collect();
    sizes.sort();
    sizes.dedup();
    let mut out = String::from("| mode |");
    for s in &sizes {
        let _ = write!(out, " |X_L|={s} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(sizes.len()));
    out.push('\n');
    for m in modes {
        let _ = write!(out, "| {m} |");
        for s in &sizes {
            match rows.iter().find(|r| r.mode == m && r.n_labeled == *s) {
                Some(r) => {
                    let _ = write!(out, " {:.3} ± {:.3} ({}) |", r.summary.mean, r.summary.std, r.summary.runs);
                }
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}
