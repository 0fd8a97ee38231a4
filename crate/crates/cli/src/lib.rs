//! `dfbench` subcommands: preprocess a frame tree into a split manifest,
//! fine-tune a detector, predict per-clip scores, benchmark prediction dumps
//! against each other, and re-render saved reports.
//!
//! All randomness derives from one seed (`--seed`, the config file's `seed`,
//! `DFBENCH_SEED`, then 0).

pub mod settings;

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use dfbench::baselines::{BuildOptions, Registry};
use dfbench::data::{
    anonymize_names, compute_dataset_stats, load_image_set, load_manifest, scan_frame_tree, split_dataset,
    write_manifest, write_synthetic_corpus, AugmentationConfig, IdentityCropper, Manifest, Split, SplitSpec,
};
use dfbench::detector::{load_weights, Detector};
use dfbench::evaluation::{
    comparison_table, emit_report, predict_manifest, read_predictions, read_report, write_jsonl, Aggregation,
    MetricsReport, PredictOptions, PredictionRecord, REPORT_FILE,
};
use dfbench::genconvit::{CombineMode, ScalePreset};
use dfbench::training::{finetune, load_checkpoint, Checkpoint, TrainConfig};

use settings::{List, Settings};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const MAP_FILE: &str = "anonymization_map.tsv";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const COMPARISON_FILE: &str = "comparison.tsv";

#[derive(Debug, Parser)]
#[command(name = "dfbench", version, about = "Deepfake detector fine-tuning and benchmarking")]
pub struct Cli {
    /// Flat TOML file of default option values (flags take precedence).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a split manifest from `real/<clip>/` and `fake/<method>/<clip>/` frame folders.
    Preprocess(PreprocessArgs),
    /// Fine-tune a detector on the manifest's train split.
    Train(TrainArgs),
    /// Score clips with a checkpoint and write a prediction dump.
    Predict(PredictArgs),
    /// Compute reports for several models and a comparison table.
    Benchmark(BenchmarkArgs),
    /// Print the comparison table of saved reports.
    Report(ReportArgs),
    /// Write a synthetic blob corpus in the preprocess input layout.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Root of the labelled frame tree.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for the manifest, stats and anonymisation map.
    #[arg(long)]
    pub out: PathBuf,
    /// Train/val/test shares as percentages or fractions, e.g. `80,15,5`.
    #[arg(long)]
    pub split: Option<List<f64>>,
    /// Replace sample ids with opaque tokens and write the map alongside.
    #[arg(long)]
    pub anonymize: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Scale preset: `desk` or `paper_tiny`.
    #[arg(long)]
    pub preset: Option<ScalePreset>,
    /// Ensemble combination: avg, max, a_only or b_only.
    #[arg(long)]
    pub combine: Option<CombineMode>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Registered model name.
    #[arg(long)]
    pub model: Option<String>,
    /// Directory for checkpoints and the epoch log.
    #[arg(long)]
    pub out: PathBuf,
    /// Epochs to checkpoint at, e.g. `4,5,8,10`; training runs to the largest.
    #[arg(long)]
    pub epochs: Option<List<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Frames sampled per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Probability of augmenting a training image.
    #[arg(long)]
    pub aug_rate: Option<f64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model_args: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PredictOptionsArgs {
    /// Frames sampled per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Frame-to-clip aggregation: mean, max or majority.
    #[arg(long)]
    pub agg: Option<Aggregation>,
    /// Split to score: train, val, test or all.
    #[arg(long)]
    pub split: Option<String>,
    #[command(flatten)]
    pub model_args: ModelArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prediction dump to write (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every per-frame score here.
    #[arg(long)]
    pub frame_dump: Option<PathBuf>,
    #[command(flatten)]
    pub options: PredictOptionsArgs,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// Prediction dump as `NAME=PATH` or `PATH` (named after the file stem).
    #[arg(long = "predictions")]
    pub predictions: Vec<String>,
    /// Checkpoint to score on `--manifest` first.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Fake-probability decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output directory: one report folder per model plus the comparison table.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub options: PredictOptionsArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json` files or directories holding one.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub clips: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.seed(cli.seed)?;
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a, &settings, seed),
        Command::Train(a) => cmd_train(&a, &settings, seed),
        Command::Predict(a) => cmd_predict(&a, &settings),
        Command::Benchmark(a) => cmd_benchmark(&a, &settings),
        Command::Report(a) => cmd_report(&a),
        Command::Synth(a) => cmd_synth(&a, seed),
    }
}

/// Accepts percentages summing to 100 or fractions summing to 1.
pub fn parse_split(parts: &[f64], seed: u64) -> Result<SplitSpec> {
    ensure!(parts.len() == 3, "--split takes three values (train,val,test), got {}", parts.len());
    let sum: f64 = parts.iter().sum();
    let scale = if (sum - 100.0).abs() < 1e-6 { 100.0 } else { 1.0 };
    Ok(SplitSpec::new(parts[0] / scale, parts[1] / scale, parts[2] / scale, seed)?)
}

fn cmd_preprocess(a: &PreprocessArgs, s: &Settings, seed: u64) -> Result<()> {
    let split = s.resolve(a.split.clone(), "split", List(vec![80.0, 15.0, 5.0]))?;
    let spec = parse_split(&split.0, seed)?;
    let anonymize = a.anonymize || s.resolve(None, "anonymize", false)?;
    let input = a
        .input
        .canonicalize()
        .with_context(|| format!("input directory {}", a.input.display()))?;
    let scanned = scan_frame_tree(&input)?;
    let mut entries = split_dataset(&scanned.entries, &spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if anonymize {
        let (renamed, map) = anonymize_names(&entries, seed);
        map.write(&a.out.join(MAP_FILE))?;
        entries = renamed;
    }
    let mut manifest = Manifest::new(input, entries)?;
    manifest.split = Some(spec);
    let path = a.out.join(MANIFEST_FILE);
    write_manifest(&path, &manifest)?;
    let stats = compute_dataset_stats(&manifest.entries);
    std::fs::write(a.out.join(STATS_FILE), serde_json::to_string_pretty(&stats)?)?;
    println!("manifest\t{}", path.display());
    println!("entries\t{}", stats.total);
    for (k, v) in stats.by_label.iter().chain(&stats.by_split) {
        println!("{k}\t{v}");
    }
    for (k, v) in &stats.by_method {
        println!("method[{k}]\t{v}");
    }
    Ok(())
}

fn build_options(m: &ModelArgs, s: &Settings, seed: u64) -> Result<BuildOptions> {
    Ok(BuildOptions {
        preset: s.resolve(m.preset, "preset", ScalePreset::Desk)?,
        seed,
        combine: s.resolve(m.combine, "combine", CombineMode::default())?,
    })
}

fn cmd_train(a: &TrainArgs, s: &Settings, seed: u64) -> Result<()> {
    let model = s.resolve(a.model.clone(), "model", "genconvit_ae".to_string())?;
    let opts = build_options(&a.model_args, s, seed)?;
    let defaults = TrainConfig::for_model(&model);
    let frames = s.resolve(a.frames, "frames", 15usize)?;
    let cfg = TrainConfig {
        learning_rate: s.resolve(a.lr, "lr", defaults.learning_rate)?,
        batch_size: s.resolve(a.batch, "batch", defaults.batch_size)?,
        epochs: s.resolve(a.epochs.clone(), "epochs", List(defaults.epochs.clone()))?.0,
        augmentation: AugmentationConfig {
            rate: s.resolve(a.aug_rate, "aug_rate", defaults.augmentation.rate)?,
            seed,
            ..defaults.augmentation.clone()
        },
        seed,
        checkpoint_in: s.resolve_opt(a.resume.clone(), "resume")?,
        checkpoint_dir: Some(a.out.clone()),
        log_path: Some(a.out.join(EPOCH_LOG_FILE)),
        ..defaults
    };
    let manifest = load_manifest(&a.manifest)?;
    let mut detector = Registry::with_defaults().build(&model, &opts)?;
    let size = detector.input_size();
    let train = load_image_set(&manifest, Some(Split::Train), frames, size, &IdentityCropper)?;
    let val = load_image_set(&manifest, Some(Split::Val), frames, size, &IdentityCropper)?;
    ensure!(!train.is_empty(), "manifest {} has no train entries", a.manifest.display());
    ensure!(!val.is_empty(), "manifest {} has no val entries", a.manifest.display());
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = finetune(detector.as_mut(), &cfg, &train, &val)?;
    for r in &outcome.checkpoint.history {
        println!(
            "epoch {}\ttrain_loss {:.6}\tval_loss {:.6}\tval_acc {:.4}\t{:.1}s",
            r.epoch, r.train_loss, r.val_loss, r.val_acc, r.wall_seconds
        );
    }
    for (epoch, path) in &outcome.saved {
        println!("checkpoint {epoch}\t{}", path.display());
    }
    Ok(())
}

/// Rebuilds the checkpoint's model at whichever preset its weights fit.
/// The ensemble combination comes from the flag, else the checkpoint.
pub fn detector_from_checkpoint(ckpt: &Checkpoint, combine: Option<CombineMode>) -> Result<Box<dyn Detector>> {
    let stored = ckpt
        .config
        .get("combine")
        .and_then(|v| serde_json::from_value::<CombineMode>(v.clone()).ok());
    let combine = combine.or(stored).unwrap_or_default();
    let registry = Registry::with_defaults();
    for preset in [ScalePreset::Desk, ScalePreset::PaperTiny] {
        let mut det = registry.build(&ckpt.model, &BuildOptions { preset, seed: 0, combine })?;
        if det.params().check_compatible(&ckpt.params).is_ok() {
            load_weights(det.as_mut(), &ckpt.params)?;
            return Ok(det);
        }
    }
    bail!("checkpoint weights for `{}` match no known preset", ckpt.model)
}

fn predict_options(o: &PredictOptionsArgs, s: &Settings) -> Result<PredictOptions> {
    let frames = s.resolve(o.frames, "frames", 15usize)?;
    ensure!(frames >= 1, "--frames must be at least 1");
    let split = match s.resolve(o.split.clone(), "split_eval", "test".to_string())?.as_str() {
        "all" => None,
        other => Some(other.parse::<Split>()?),
    };
    Ok(PredictOptions {
        frames,
        aggregation: s.resolve(o.agg, "agg", Aggregation::Mean)?,
        split,
    })
}

fn combine_flag(m: &ModelArgs, s: &Settings) -> Result<Option<CombineMode>> {
    s.resolve_opt(m.combine, "combine")
}

fn predict_with_checkpoint(
    checkpoint: &Path,
    manifest: &Manifest,
    opts: &PredictOptions,
    combine: Option<CombineMode>,
) -> Result<(String, Vec<PredictionRecord>, Vec<dfbench::evaluation::FrameScore>)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let det = detector_from_checkpoint(&ckpt, combine)?;
    let (records, frames) = predict_manifest(det.as_ref(), manifest, opts, &IdentityCropper)?;
    Ok((ckpt.model, records, frames))
}

fn cmd_predict(a: &PredictArgs, s: &Settings) -> Result<()> {
    let opts = predict_options(&a.options, s)?;
    let manifest = load_manifest(&a.manifest)?;
    let (model, records, frames) =
        predict_with_checkpoint(&a.checkpoint, &manifest, &opts, combine_flag(&a.options.model_args, s)?)?;
    write_jsonl(&a.out, &records)?;
    if let Some(p) = &a.frame_dump {
        write_jsonl(p, &frames)?;
    }
    println!("{model}: {} clips scored\t{}", records.len(), a.out.display());
    Ok(())
}

fn named_dump(spec: &str) -> Result<(String, PathBuf)> {
    if let Some((name, path)) = spec.split_once('=') {
        ensure!(!name.is_empty(), "empty model name in `{spec}`");
        return Ok((name.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(spec);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .with_context(|| format!("cannot name a model after `{spec}`"))?;
    Ok((name, path))
}

fn cmd_benchmark(a: &BenchmarkArgs, s: &Settings) -> Result<()> {
    let threshold = s.resolve(a.threshold, "threshold", 0.5f64)?;
    ensure!((0.0..=1.0).contains(&threshold), "--threshold must lie in [0, 1]");
    ensure!(
        !a.predictions.is_empty() || !a.checkpoints.is_empty(),
        "give at least one --predictions dump or --checkpoint"
    );
    let mut runs: Vec<(String, Vec<PredictionRecord>)> = Vec::new();
    for spec in &a.predictions {
        let (name, path) = named_dump(spec)?;
        runs.push((name, read_predictions(&path)?));
    }
    if !a.checkpoints.is_empty() {
        let manifest_path = a.manifest.as_ref().context("--checkpoint needs --manifest")?;
        let manifest = load_manifest(manifest_path)?;
        let opts = predict_options(&a.options, s)?;
        let combine = combine_flag(&a.options.model_args, s)?;
        for c in &a.checkpoints {
            let (model, records, _) = predict_with_checkpoint(c, &manifest, &opts, combine)?;
            write_jsonl(&a.out.join(&model).join(PREDICTIONS_FILE), &records)?;
            runs.push((model, records));
        }
    }
    let mut reports = Vec::new();
    for (name, records) in &runs {
        ensure!(
            reports.iter().all(|r: &MetricsReport| &r.model != name),
            "model `{name}` appears twice; name dumps with NAME=PATH"
        );
        let report = MetricsReport::from_records(name, records, threshold).with_context(|| format!("model `{name}`"))?;
        emit_report(&report, &a.out.join(name))?;
        reports.push(report);
    }
    let table = comparison_table(&reports);
    std::fs::write(a.out.join(COMPARISON_FILE), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
            Ok(read_report(&file)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let table = comparison_table(&reports);
    if let Some(out) = &a.out {
        std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{table}");
    Ok(())
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let manifest = write_synthetic_corpus(&a.out, a.clips, a.frames, a.size, seed)?;
    println!("frames\t{}", a.out.join("frames").display());
    println!("manifest\t{}", manifest.display());
    Ok(())
}
