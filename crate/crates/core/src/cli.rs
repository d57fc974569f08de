//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::data::{
    colorize_mask, encode_mask, generate_synthetic, kfold_split, load_endovis, palette, read_mask, read_rgb,
    write_dataset, write_rgb, Dataset, EncodeMode, InMemoryDataset, LabelMapping, LoadMode, RawSample,
    SynthSpec,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict, write_prediction, PredictionRecord};
use crate::report::{export_report, ReportFormat};
use crate::task::TaskKind;
use crate::train::{load_checkpoint, Checkpoint, TrainConfig, Trainer};

/// Environment variable holding the default dataset root.
pub const DATA_ENV: &str = "NESTSEG_DATA";
pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "nestseg", version, about = "Nested U-structure surgical instrument segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one cross-validation fold.
    Train(TrainArgs),
    /// Score a checkpoint against ground truth.
    Evaluate(EvaluateArgs),
    /// Write predicted masks for a directory of frames.
    Predict(PredictArgs),
    /// Render label masks with the task palette.
    Colorize(ColorizeArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Print the video-level k-fold assignment.
    Folds(FoldsArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML training config; missing keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    task: TaskKind,
    /// Fold index to hold out, or `all` to train on every video without validation.
    #[arg(long)]
    fold: String,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    /// Checkpoint directory (overrides `checkpoint_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = DATA_ENV)]
    data: PathBuf,
    #[arg(long, default_value = "evaluation")]
    out: PathBuf,
    /// Restrict to these videos (comma separated).
    #[arg(long, value_delimiter = ',')]
    videos: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "csv,json,markdown")]
    formats: Vec<String>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A dataset root (`<video>/frames/`) or a flat directory of frames.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write `_color.png` renderings.
    #[arg(long)]
    colorize: bool,
    /// Re-embed 1280x1024 masks into a 1920x1080 canvas.
    #[arg(long)]
    full_canvas: bool,
}

#[derive(Debug, Args)]
struct ColorizeArgs {
    /// A mask PNG or a directory of mask PNGs.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    task: TaskKind,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Input already holds class indices rather than raw label values.
    #[arg(long)]
    classes: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    images: usize,
    /// HEIGHTxWIDTH, both multiples of 32.
    #[arg(long, default_value = "256x320")]
    size: String,
    #[arg(long, default_value = "binary")]
    task: TaskKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    /// Instruments per image as MIN-MAX.
    #[arg(long, default_value = "1-3")]
    instruments: String,
    /// Add raw-value-40 probe blobs to parts masks.
    #[arg(long)]
    probes: bool,
}

#[derive(Debug, Args)]
struct FoldsArgs {
    #[arg(long, env = DATA_ENV, conflicts_with = "videos")]
    data: Option<PathBuf>,
    /// Explicit video ids (comma separated) instead of a dataset root.
    #[arg(long, value_delimiter = ',')]
    videos: Vec<String>,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write `folds.json` and a run manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let args: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::Train(a) => train_cmd(a, argv),
        Command::Evaluate(a) => evaluate_cmd(a, argv),
        Command::Predict(a) => predict_cmd(a, argv),
        Command::Colorize(a) => colorize_cmd(a, argv),
        Command::Synth(a) => synth_cmd(a, argv),
        Command::Folds(a) => folds_cmd(a, argv),
    }
}

fn write_manifest(dir: &Path, subcommand: &str, argv: &[String], resolved: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = json!({
        "tool": "nestseg",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "argv": argv.get(1..).unwrap_or_default(),
        "resolved": resolved,
    });
    std::fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    cfg.task = a.task;
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &a.out {
        cfg.checkpoint_dir = out.clone();
    }
    let all = a.fold.eq_ignore_ascii_case("all");
    if !all {
        cfg.fold_index = a.fold.parse().map_err(|_| Error::Config(format!("--fold `{}` is not an index or `all`", a.fold)))?;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    let index = load_endovis(&a.data, cfg.task, LoadMode::Training)?;
    for (video, n) in index.counts_per_video() {
        log::info!("video {video}: {n} frames");
    }
    let split = if all { None } else { Some(kfold_split(&index.video_ids(), cfg.k_folds, cfg.seed)?) };
    write_manifest(
        &cfg.checkpoint_dir,
        "train",
        argv,
        json!({ "config": cfg, "data": a.data, "fold": a.fold, "resume": a.resume, "folds": split }),
    )?;
    let all_indices = || (0..index.len()).collect::<Vec<_>>();
    let trainer = match (&split, &a.resume) {
        (Some(split), Some(path)) => Trainer::resume(cfg.clone(), &index, split, load_checkpoint::<f32>(path)?)?,
        (Some(split), None) => Trainer::new(cfg.clone(), &index, split)?,
        (None, Some(path)) => {
            Trainer::resume_with_indices(cfg.clone(), &index, all_indices(), Vec::new(), load_checkpoint::<f32>(path)?)?
        }
        (None, None) => Trainer::with_indices(cfg.clone(), &index, all_indices(), Vec::new())?,
    };
    let out = trainer.run()?;
    let last = out.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs: final loss {:.6}, best epoch {}",
        out.history.records.len(),
        last.train_loss,
        out.history.best_epoch.map_or("-".into(), |e| e.to_string())
    );
    println!("checkpoints in {}", cfg.checkpoint_dir.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, argv: &[String]) -> Result<()> {
    let formats = a.formats.iter().map(|f| f.parse()).collect::<Result<Vec<ReportFormat>>>()?;
    let ck: Checkpoint<f32> = load_checkpoint(&a.checkpoint)?;
    let index = load_endovis(&a.data, ck.task.kind, LoadMode::Training)?;
    let indices: Vec<usize> = if a.videos.is_empty() { (0..index.len()).collect() } else { index.indices_for(&a.videos) };
    if indices.is_empty() {
        return Err(Error::Empty("no frames match the requested videos".into()));
    }
    let mapping = LabelMapping::default_for(ck.task.kind);
    let report = evaluate(&ck.model, &index, &indices, &ck.stats, &ck.task, &mapping)?;
    write_manifest(
        &a.out,
        "evaluate",
        argv,
        json!({ "checkpoint": a.checkpoint, "data": a.data, "videos": a.videos, "formats": a.formats, "task": ck.task }),
    )?;
    for f in formats {
        export_report(&report, f, &a.out.join(format!("report.{}", f.extension())))?;
    }
    print!("{}\n{}", report.table_i(), report.table_ii());
    Ok(())
}

/// Frames under `dir`: a dataset root when it has `<video>/frames/`, else a flat folder.
fn frames_source(dir: &Path, task: TaskKind) -> Result<Box<dyn Dataset>> {
    match load_endovis(dir, task, LoadMode::PredictOnly) {
        Ok(index) => Ok(Box::new(index)),
        Err(Error::Layout(_)) => {
            let video = dir.file_name().and_then(|n| n.to_str()).unwrap_or("frames").to_string();
            let mut samples = Vec::new();
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            paths.sort();
            for (i, p) in paths.into_iter().filter(|p| has_image_ext(p)).enumerate() {
                let image = crop_if_full(read_rgb(&p)?)?;
                let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                samples.push(RawSample { image, raw_mask: None, video_id: video.clone(), frame_index: i, name });
            }
            if samples.is_empty() {
                return Err(Error::Layout(format!("no frames found in {}", dir.display())));
            }
            Ok(Box::new(InMemoryDataset::new(samples)))
        }
        Err(e) => Err(e),
    }
}

fn has_image_ext(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(), Some("png" | "jpg" | "jpeg"))
}

fn crop_if_full(img: ndarray::Array3<u8>) -> Result<ndarray::Array3<u8>> {
    if img.shape()[0] == crate::data::FULL_HEIGHT && img.shape()[1] == crate::data::FULL_WIDTH {
        crate::data::crop_canvas(&img)
    } else {
        Ok(img)
    }
}

fn predict_cmd(a: PredictArgs, argv: &[String]) -> Result<()> {
    let ck: Checkpoint<f32> = load_checkpoint(&a.checkpoint)?;
    let source = frames_source(&a.frames, ck.task.kind)?;
    let mapping = LabelMapping::default_for(ck.task.kind);
    write_manifest(
        &a.out,
        "predict",
        argv,
        json!({ "checkpoint": a.checkpoint, "frames": a.frames, "colorize": a.colorize, "full_canvas": a.full_canvas, "task": ck.task }),
    )?;
    for i in 0..source.len() {
        let sample = source.load(i)?;
        let pred_mask = predict(&ck.model, &sample, &ck.stats, &ck.task)?;
        let record = PredictionRecord { image_id: sample.image_id(), video_id: sample.video_id.clone(), pred_mask, gt_mask: None };
        write_prediction(&a.out, &record, &mapping, a.colorize, a.full_canvas)?;
    }
    println!("wrote {} masks to {}", source.len(), a.out.display());
    Ok(())
}

fn colorize_cmd(a: ColorizeArgs, argv: &[String]) -> Result<()> {
    let inputs: Vec<PathBuf> = if a.mask.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.mask)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else {
        vec![a.mask.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Empty(format!("no PNG masks in {}", a.mask.display())));
    }
    let mapping = LabelMapping::default_for(a.task);
    std::fs::create_dir_all(&a.out)?;
    for path in &inputs {
        let raw = read_mask(path)?;
        let classes = if a.classes { raw } else { encode_mask(&raw, &mapping, EncodeMode::Strict)?.0 };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mask");
        write_rgb(&a.out.join(format!("{stem}_color.png")), &colorize_mask(&classes, a.task)?)?;
    }
    let pal: Vec<serde_json::Value> = palette(a.task)
        .iter()
        .zip(&mapping.class_names)
        .enumerate()
        .map(|(c, (rgb, name))| json!({ "class": c, "name": name, "rgb": rgb }))
        .collect();
    std::fs::write(a.out.join("palette.json"), serde_json::to_string_pretty(&pal)?)?;
    write_manifest(&a.out, "colorize", argv, json!({ "mask": a.mask, "task": a.task, "classes": a.classes }))?;
    println!("colorized {} masks into {}", inputs.len(), a.out.display());
    Ok(())
}

fn parse_pair(text: &str, sep: char, what: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("{what} `{text}` should look like A{sep}B"));
    let (a, b) = text.split_once(sep).ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn synth_cmd(a: SynthArgs, argv: &[String]) -> Result<()> {
    let (height, width) = parse_pair(&a.size, 'x', "--size")?;
    let spec = SynthSpec {
        instruments_per_image: parse_pair(&a.instruments, '-', "--instruments")?,
        num_videos: a.videos,
        probe_shapes: a.probes,
        ..SynthSpec::new(a.images, height, width, a.task, a.seed)
    };
    let samples = generate_synthetic(&spec)?;
    write_dataset(&samples, &a.out, a.task)?;
    write_manifest(&a.out, "synth", argv, json!({ "spec": spec }))?;
    println!("wrote {} synthetic frames to {}", samples.len(), a.out.display());
    Ok(())
}

fn folds_cmd(a: FoldsArgs, argv: &[String]) -> Result<()> {
    let videos = match (&a.data, a.videos.is_empty()) {
        (_, false) => a.videos.clone(),
        (Some(root), true) => load_endovis(root, TaskKind::Binary, LoadMode::PredictOnly)?.video_ids(),
        (None, true) => return Err(Error::Config(format!("pass --videos or --data (or set {DATA_ENV})"))),
    };
    let split = kfold_split(&videos, a.k, a.seed)?;
    for view in split.views() {
        println!("fold {}: validation [{}] train [{}]", view.fold, view.validation.join(", "), view.train.join(", "));
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("folds.json"), serde_json::to_string_pretty(&split)?)?;
        write_manifest(out, "folds", argv, json!({ "videos": videos, "k": a.k, "seed": a.seed }))?;
    }
    Ok(())
}
