//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure. Every
//! command that writes files echoes its resolved configuration as `config.toml` next to
//! its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Preset};
use crate::dataset::{
    generate_synthetic_dataset, load_dataset, make_run_split, save_dataset, DatasetEntry, LabelVolume, LabeledVolume,
    Volume,
};
use crate::evaluate::{aggregate_runs, evaluate_model, export_pixel_representations, EvalReport};
use crate::losses::MatchMode;
use crate::network::checkpoint::{load_backbone, load_checkpoint, save_checkpoint};
use crate::network::Parameters;
use crate::preprocess::preprocess_volume;
use crate::pseudolabel::{consistency_score, estimate_pseudo_labels, filter_by_consistency, save_store};
use crate::trainer::experiment::{summary_table, ModeSummary};
use crate::trainer::metrics::write_jsonl;
use crate::trainer::{select_best_model, train_phase1_from, train_phase2, QualityTracker, TrainMode, TrainState};

#[derive(Debug, Parser)]
#[command(name = "locon", version, about = "Pseudo-label contrastive semi-supervised segmentation")]
pub struct Cli {
    /// TOML config layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset used for every field the config file leaves out.
    #[arg(long, global = true, default_value = "desk", value_parser = parse_preset)]
    pub preset: Preset,
    /// Overrides the config file and LOCON_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_match(s: &str) -> Result<MatchMode, String> {
    match s {
        "intra" => Ok(MatchMode::Intra),
        "inter" => Ok(MatchMode::Inter),
        "pooled" => Ok(MatchMode::Pooled),
        _ => Err(format!("unknown matching scheme `{s}` (intra, inter, pooled)")),
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Normalize, resample and crop/pad a dataset.
    Preprocess(PreprocessArgs),
    /// Train one run (phase 1, then phase 2 unless --phase1-only).
    Train(TrainArgs),
    /// Estimate (and optionally filter) pseudo-labels with a checkpoint.
    PseudoLabel(PseudoLabelArgs),
    /// Score a checkpoint on the test split (or every labeled volume).
    Evaluate(EvaluateArgs),
    /// Export backbone pixel representations as CSV.
    ExportReps(ExportArgs),
    /// Aggregate evaluated run directories into a mode x |X_L| table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<u8>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed dataset directory or manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub labeled_volumes: Option<usize>,
    #[arg(long)]
    pub phase1_iters: Option<u64>,
    #[arg(long)]
    pub phase2_iters: Option<u64>,
    #[arg(long)]
    pub refresh_period: Option<u64>,
    #[arg(long)]
    pub pseudo_steps: Option<usize>,
    #[arg(long)]
    pub lambda_cont: Option<f64>,
    #[arg(long, value_parser = parse_match)]
    pub matching: Option<MatchMode>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub consistency_threshold: Option<f64>,
    #[arg(long)]
    pub validation_period: Option<u64>,
    #[arg(long)]
    pub phase1_only: bool,
    /// Checkpoint whose backbone initializes the network (heads start fresh).
    #[arg(long)]
    pub init_backbone: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PseudoLabelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub consistency_threshold: Option<f64>,
    /// Label every volume instead of only the unlabeled split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Where `eval_report.json` goes; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Score every labeled volume instead of the test split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub per_class: usize,
    /// Export from every labeled volume instead of the test split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories holding `config.toml` and `eval_report.json`.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

/// Config and argument problems are usage errors; everything else is a runtime failure.
fn classify(e: anyhow::Error) -> CliError {
    match e.downcast_ref::<crate::Error>() {
        Some(crate::Error::Config(_)) | Some(crate::Error::InvalidArgument { .. }) => CliError::Usage(e),
        _ => CliError::Runtime(e),
    }
}

type CmdResult<T = ()> = std::result::Result<T, CliError>;

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    classify(e.into())
}

fn resolve_config(cli: &Cli, fallback: Option<&Path>) -> CmdResult<ExperimentConfig> {
    let path = cli.config.as_deref().or(fallback.filter(|p| p.exists()));
    let mut cfg = ExperimentConfig::load(path, cli.preset).map_err(usage)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.sync();
    }
    Ok(cfg)
}

fn finish_config(cfg: &ExperimentConfig) -> CmdResult {
    cfg.validate().map_err(usage)
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::Generate(a) => cmd_generate(&cli, a),
        Command::Preprocess(a) => cmd_preprocess(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::PseudoLabel(a) => cmd_pseudo_label(&cli, a),
        Command::Evaluate(a) => cmd_evaluate(&cli, a),
        Command::ExportReps(a) => cmd_export_reps(&cli, a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn labeled_entries(entries: Vec<DatasetEntry>) -> (Vec<LabeledVolume>, Vec<Volume>) {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (v, l) in entries {
        match l {
            Some(l) => labeled.push((v, l)),
            None => unlabeled.push(v),
        }
    }
    (labeled, unlabeled)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn cmd_generate(cli: &Cli, a: &GenerateArgs) -> CmdResult {
    let mut cfg = resolve_config(cli, None)?;
    if let Some(n) = a.subjects {
        cfg.synthetic.num_subjects = n;
    }
    if let Some(c) = a.num_classes {
        cfg.synthetic.num_classes = c;
        cfg.synthetic.intensity_ranges = crate::dataset::default_intensity_ranges(c);
        cfg.network.num_classes_plus_bg = c as usize + 1;
    }
    if let Some(o) = &a.out {
        cfg.paths.raw_dir = o.clone();
    }
    finish_config(&cfg)?;
    let out = cfg.paths.raw_dir.clone();
    cfg.echo(&out).map_err(runtime)?;
    let data = generate_synthetic_dataset(&cfg.synthetic, cfg.data_seed).map_err(runtime)?;
    let entries: Vec<DatasetEntry> = data.into_iter().map(|(v, l)| (v, Some(l))).collect();
    let m = save_dataset(&out, &entries, cfg.synthetic.num_classes).map_err(runtime)?;
    println!("wrote {} subjects to {}", entries.len(), m.display());
    Ok(())
}

pub fn cmd_preprocess(cli: &Cli, a: &PreprocessArgs) -> CmdResult {
    let mut cfg = resolve_config(cli, None)?;
    if let Some(i) = &a.input {
        cfg.paths.raw_dir = i.clone();
    }
    if let Some(o) = &a.out {
        cfg.paths.data_dir = o.clone();
    }
    finish_config(&cfg)?;
    let (entries, c) = load_dataset(&cfg.paths.raw_dir).map_err(runtime)?;
    let mut out = Vec::with_capacity(entries.len());
    for (v, l) in &entries {
        let (pv, pl) = preprocess_volume(v, l.as_ref(), &cfg.preprocess)
            .with_context(|| format!("preprocessing {}", v.subject_id))
            .map_err(runtime)?;
        out.push((pv, pl));
    }
    cfg.echo(&cfg.paths.data_dir).map_err(runtime)?;
    let m = save_dataset(&cfg.paths.data_dir, &out, c).map_err(runtime)?;
    println!("preprocessed {} subjects into {}", out.len(), m.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitRecord {
    seed: u64,
    labeled: Vec<String>,
    unlabeled: Vec<String>,
    validation: Vec<String>,
    test: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    mode: TrainMode,
    seed: u64,
    iterations: u64,
    best_iteration: Option<u64>,
    best_val_dsc: Option<f64>,
    pseudo_quality: Vec<Option<f64>>,
    audit: crate::trainer::LossAudit,
}

fn load_labeled(dir: &Path) -> CmdResult<Vec<LabeledVolume>> {
    let (entries, _) = load_dataset(dir).map_err(runtime)?;
    let (labeled, unlabeled) = labeled_entries(entries);
    if !unlabeled.is_empty() {
        log::warn!("{} volumes without labels are ignored", unlabeled.len());
    }
    Ok(labeled)
}

pub fn cmd_train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut cfg = resolve_config(cli, None)?;
    if let Some(d) = &a.data {
        cfg.paths.data_dir = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.paths.run_dir = o.clone();
    }
    let t = &mut cfg.train;
    if let Some(m) = a.mode {
        *t = t.with_mode(m);
    }
    if let Some(v) = a.phase1_iters {
        t.phase1_iters = v;
    }
    if let Some(v) = a.phase2_iters {
        t.phase2_iters = v;
    }
    if let Some(v) = a.refresh_period {
        t.refresh_period = v;
    }
    if let Some(v) = a.pseudo_steps {
        t.num_pseudo_steps = v;
    }
    if let Some(v) = a.lambda_cont {
        t.contrastive.lambda_cont = v;
    }
    if let Some(v) = a.matching {
        t.contrastive.mode = v;
    }
    if let Some(v) = a.samples_per_class {
        t.contrastive.samples_per_class = v;
    }
    if let Some(v) = a.consistency_threshold {
        t.consistency.threshold = v;
    }
    if let Some(v) = a.validation_period {
        t.validation_period = v;
    }
    if let Some(n) = a.labeled_volumes {
        cfg.split.n_labeled = n;
    }
    finish_config(&cfg)?;
    let run_dir = cfg.paths.run_dir.clone();
    cfg.echo(&run_dir).map_err(runtime)?;

    let dataset = load_labeled(&cfg.paths.data_dir)?;
    if let Some((v, _)) = dataset.first() {
        if (v.height, v.width) != cfg.network.input_dims {
            return Err(usage(anyhow!(
                "dataset slices are {}x{} but network.input_dims is {:?}; preprocess with matching target_dims",
                v.height,
                v.width,
                cfg.network.input_dims
            )));
        }
    }
    let s = &cfg.split;
    let (split, truth) =
        make_run_split(&dataset, s.n_labeled, s.n_val, s.n_test, s.partition_seed, cfg.seed).map_err(runtime)?;
    let ids = |v: &[LabeledVolume]| v.iter().map(|(v, _)| v.subject_id.clone()).collect::<Vec<_>>();
    write_json(
        &run_dir.join("split.json"),
        &SplitRecord {
            seed: cfg.seed,
            labeled: ids(&split.labeled),
            unlabeled: split.unlabeled.iter().map(|v| v.subject_id.clone()).collect(),
            validation: ids(&split.validation),
            test: ids(&split.test),
        },
    )?;

    let params = match &a.init_backbone {
        Some(p) => load_backbone(p, &cfg.network, cfg.seed).map_err(runtime)?,
        None => Parameters::init(&cfg.network, cfg.seed).map_err(runtime)?,
    };
    let state = TrainState::from_params(params, &cfg.train);
    let state = train_phase1_from(state, &split, &cfg.train).map_err(runtime)?;
    let meta = serde_json::json!({ "mode": cfg.train.mode, "seed": cfg.seed });
    save_checkpoint(&run_dir.join("phase1.ckpt"), &state.params, Some(&state.optimizer), state.iteration, &meta)
        .map_err(runtime)?;
    let mut tracker = QualityTracker::new(&truth);
    let state = if a.phase1_only {
        state
    } else {
        train_phase2(&split, state, &cfg.train, &mut tracker).map_err(runtime)?
    };
    save_checkpoint(&run_dir.join("final.ckpt"), &state.params, Some(&state.optimizer), state.iteration, &meta)
        .map_err(runtime)?;
    if let Ok(best) = select_best_model(&state) {
        let it = state.best.as_ref().map_or(state.iteration, |b| b.iteration);
        save_checkpoint(&run_dir.join("best.ckpt"), &best, None, it, &meta).map_err(runtime)?;
    } else {
        log::warn!("no validation volumes; best.ckpt is the final model");
        save_checkpoint(&run_dir.join("best.ckpt"), &state.params, None, state.iteration, &meta).map_err(runtime)?;
    }
    write_jsonl(&run_dir.join("metrics.jsonl"), &state.metrics).map_err(runtime)?;
    if let Some(store) = &state.pseudo_store {
        save_store(&run_dir.join("pseudo_labels"), store).map_err(runtime)?;
    }
    let summary = TrainSummary {
        mode: cfg.train.mode,
        seed: cfg.seed,
        iterations: state.iteration,
        best_iteration: state.best.as_ref().map(|b| b.iteration),
        best_val_dsc: state.best_val_dsc,
        pseudo_quality: tracker.history.iter().map(|(_, q)| *q).collect(),
        audit: state.audit,
    };
    write_json(&run_dir.join("train_summary.json"), &summary)?;
    println!(
        "trained {} for {} iterations; best validation DSC {}",
        cfg.train.mode,
        state.iteration,
        state.best_val_dsc.map_or("n/a".into(), |d| format!("{d:.4}"))
    );
    Ok(())
}

/// Config for a command that starts from a checkpoint: explicit `--config`, else the
/// `config.toml` next to the checkpoint, else the preset.
fn checkpoint_config(cli: &Cli, checkpoint: &Path, data: Option<&PathBuf>) -> CmdResult<ExperimentConfig> {
    let beside = checkpoint.parent().map(|d| d.join("config.toml"));
    let mut cfg = resolve_config(cli, beside.as_deref())?;
    if let Some(d) = data {
        cfg.paths.data_dir = d.clone();
    }
    Ok(cfg)
}

fn load_params(cfg: &ExperimentConfig, checkpoint: &Path) -> CmdResult<Parameters<f32>> {
    let ckpt = load_checkpoint(checkpoint, None).map_err(runtime)?;
    if ckpt.params.config.input_dims != cfg.preprocess.target_dims {
        return Err(runtime(anyhow!(
            "checkpoint expects {:?} inputs, config preprocesses to {:?}",
            ckpt.params.config.input_dims,
            cfg.preprocess.target_dims
        )));
    }
    Ok(ckpt.params)
}

fn check_dims(params: &Parameters<f32>, vols: &[&Volume]) -> CmdResult {
    for v in vols {
        if (v.height, v.width) != params.config.input_dims {
            bail_runtime(format!(
                "{} is {}x{}, checkpoint expects {:?}",
                v.subject_id, v.height, v.width, params.config.input_dims
            ))?;
        }
    }
    Ok(())
}

fn bail_runtime(msg: String) -> CmdResult {
    Err(CliError::Runtime(anyhow!(msg)))
}

/// The test split implied by `cfg` (it depends only on the partition seed and size).
fn test_volumes(cfg: &ExperimentConfig, dataset: &[LabeledVolume]) -> CmdResult<Vec<LabeledVolume>> {
    let s = &cfg.split;
    let (split, _) =
        make_run_split(dataset, s.n_labeled, s.n_val, s.n_test, s.partition_seed, cfg.seed).map_err(runtime)?;
    Ok(split.test)
}

pub fn cmd_pseudo_label(cli: &Cli, a: &PseudoLabelArgs) -> CmdResult {
    let mut cfg = checkpoint_config(cli, &a.checkpoint, a.data.as_ref())?;
    if let Some(t) = a.consistency_threshold {
        cfg.train.consistency.threshold = t;
    }
    finish_config(&cfg)?;
    let mut params = load_params(&cfg, &a.checkpoint)?;
    let (entries, _) = load_dataset(&cfg.paths.data_dir).map_err(runtime)?;
    let volumes: Vec<Volume> = if a.all {
        entries.into_iter().map(|(v, _)| v).collect()
    } else {
        let (labeled, mut unlabeled) = labeled_entries(entries);
        let s = &cfg.split;
        let (split, _) =
            make_run_split(&labeled, s.n_labeled, s.n_val, s.n_test, s.partition_seed, cfg.seed).map_err(runtime)?;
        unlabeled.extend(split.unlabeled);
        unlabeled
    };
    check_dims(&params, &volumes.iter().collect::<Vec<_>>())?;
    let store = estimate_pseudo_labels(&mut params, &volumes, 0).map_err(runtime)?;
    let mut scores = BTreeMap::new();
    if cfg.train.consistency.threshold > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in &volumes {
            let s = consistency_score(&mut params, v, &mut rng, &cfg.train.consistency).map_err(runtime)?;
            scores.insert(v.subject_id.clone(), s);
        }
    }
    let store = filter_by_consistency(&store, &scores, cfg.train.consistency.threshold).map_err(runtime)?;
    cfg.echo(&a.out).map_err(runtime)?;
    save_store(&a.out, &store).map_err(runtime)?;
    if !scores.is_empty() {
        write_json(&a.out.join("consistency_scores.json"), &scores)?;
    }
    println!(
        "pseudo-labeled {} volumes, {} retained, into {}",
        store.len(),
        store.retained().len(),
        a.out.display()
    );
    Ok(())
}

pub fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> CmdResult {
    let cfg = checkpoint_config(cli, &a.checkpoint, a.data.as_ref())?;
    finish_config(&cfg)?;
    let mut params = load_params(&cfg, &a.checkpoint)?;
    let dataset = load_labeled(&cfg.paths.data_dir)?;
    let vols = if a.all { dataset } else { test_volumes(&cfg, &dataset)? };
    if vols.is_empty() {
        return Err(usage(anyhow!("no labeled volumes to evaluate")));
    }
    check_dims(&params, &vols.iter().map(|(v, _)| v).collect::<Vec<_>>())?;
    let mut report = evaluate_model(&mut params, &vols).map_err(runtime)?;
    report.seed = Some(cfg.seed);
    report.config = serde_json::to_value(&cfg).map_err(runtime)?;
    let out = a
        .out
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out).map_err(runtime)?;
    if a.out.is_some() {
        cfg.echo(&out).map_err(runtime)?;
    }
    write_json(&out.join("eval_report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report_digest(&report)).map_err(runtime)?);
    Ok(())
}

/// The report without the echoed config, for stdout.
fn report_digest(r: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "foreground_mean": r.foreground_mean,
        "per_structure": r.per_structure,
        "per_volume": r.per_volume,
        "seed": r.seed,
    })
}

pub fn cmd_export_reps(cli: &Cli, a: &ExportArgs) -> CmdResult {
    let cfg = checkpoint_config(cli, &a.checkpoint, a.data.as_ref())?;
    finish_config(&cfg)?;
    if a.per_class == 0 {
        return Err(usage(anyhow!("--per-class must be >= 1")));
    }
    let mut params = load_params(&cfg, &a.checkpoint)?;
    let dataset = load_labeled(&cfg.paths.data_dir)?;
    let vols = if a.all { dataset } else { test_volumes(&cfg, &dataset)? };
    check_dims(&params, &vols.iter().map(|(v, _)| v).collect::<Vec<_>>())?;
    let pairs: Vec<(&Volume, &LabelVolume)> = vols.iter().map(|(v, l)| (v, l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = export_pixel_representations(&mut params, &pairs, a.per_class, &mut rng, &a.out).map_err(runtime)?;
    println!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

pub fn cmd_report(a: &ReportArgs) -> CmdResult {
    let mut groups: BTreeMap<(TrainMode, usize), Vec<EvalReport>> = BTreeMap::new();
    for dir in &a.runs {
        let cfg_path = dir.join("config.toml");
        let text = fs::read_to_string(&cfg_path)
            .with_context(|| format!("reading {}", cfg_path.display()))
            .map_err(usage)?;
        let cfg = ExperimentConfig::from_toml_str(&text, Preset::Desk).map_err(usage)?;
        let report: EvalReport = read_json(&dir.join("eval_report.json")).map_err(usage)?;
        groups
            .entry((cfg.train.mode, cfg.split.n_labeled))
            .or_default()
            .push(report);
    }
    let mut rows = Vec::new();
    for ((mode, n_labeled), reports) in groups {
        rows.push(ModeSummary {
            mode,
            n_labeled,
            summary: aggregate_runs(&reports).map_err(runtime)?,
        });
    }
    let table = summary_table(&rows);
    print!("{table}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(runtime)?;
        fs::write(out.join("report.md"), &table).map_err(runtime)?;
        write_json(&out.join("report.json"), &rows)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_exit_with_one() {
        assert_eq!(main_with_args(["locon", "frobnicate"]), 1);
        assert_eq!(main_with_args(["locon", "train", "--mode", "mixup"]), 1);
        assert_eq!(main_with_args(["locon", "--help"]), 0);
    }

    #[test]
    fn config_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.toml");
        fs::write(&bad, "[train]\nlearning_rate = 1\n").unwrap();
        let out = dir.path().join("o");
        let code = main_with_args([
            "locon",
            "--config",
            bad.to_str().unwrap(),
            "generate",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_inputs_exit_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let code = main_with_args([
            "locon",
            "preprocess",
            "--input",
            dir.path().join("nope").to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }
}
