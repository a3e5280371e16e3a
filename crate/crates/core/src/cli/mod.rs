//! Command-line pipeline: `gen`, `train`, `predict`, `postprocess`, `eval`,
//! `overlay`, plus `config` to print the effective configuration.
//!
//! Every command reads the flat configuration (`--config`, then `--set
//! key=value` overrides, then `--seed` / `--workers`). Failures surface as
//! a single JSON line on stderr and a nonzero exit code.

mod config;
mod dataset;
mod infer;
mod overlay;
mod train;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::{KeyDoc, RunConfig};
pub use dataset::{generate_dataset, Manifest, SplitCounts, VolumeEntry, MANIFEST};
pub use infer::predict_volume;
pub use overlay::{
    overlay_codes, render_slice, write_overlay, NONE, OVERLAP, PRED_ONLY, TRUTH_ONLY,
};
pub use train::{train, tversky_of_maps, EpochRecord, Labeled, TrainOutcome};

use crate::data::{read_volume, write_volume, Dtype, Split};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate, format_table, Averaging, EvalReport};
use crate::postproc::{binarize, keep_largest, label_components, Connectivity};
use crate::vnet::{read_checkpoint, write_checkpoint};

pub const BEST_CHECKPOINT: &str = "best.vnck";
pub const FINAL_CHECKPOINT: &str = "final.vnck";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Parser, Debug)]
#[command(
    name = "vnetseg",
    version,
    about = "Thin-sheet segmentation of volumetric phantoms"
)]
pub struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the `workers` key.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset with a split manifest.
    Gen {
        /// Output directory (default: `data_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the dataset's training split, validating every epoch.
    Train {
        /// Dataset directory (default: `data_dir`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the log (default: `run_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tiled inference on one volume, writing probability and binary maps.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        prob_out: PathBuf,
        #[arg(long)]
        mask_out: PathBuf,
        /// Binarization threshold (default: `postproc.threshold`).
        #[arg(long)]
        threshold: Option<f32>,
    },
    /// Keep the largest connected components of a mask or probability map.
    Postprocess(PostprocessArgs),
    /// Compare predictions with ground truth.
    Eval {
        /// Prediction masks; paired in order with `--truth`.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        /// Write per-volume and aggregate records here as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Sagittal overlay slices and a coded overlay volume.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip slices with no truth or predicted voxel.
        #[arg(long)]
        labeled_only: bool,
    },
    /// Print the effective configuration as a key = value file.
    Config,
}

#[derive(Args, Debug)]
pub struct PostprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Components to keep (default: `postproc.keep`).
    #[arg(long)]
    pub keep: Option<usize>,
    /// 6, 18 or 26 (default: `postproc.connectivity`).
    #[arg(long)]
    pub connectivity: Option<Connectivity>,
    /// Keep exactly these component labels instead of the largest ones.
    #[arg(long, value_delimiter = ',')]
    pub select_labels: Option<Vec<u32>>,
    /// Threshold applied when the input is a probability map.
    #[arg(long)]
    pub threshold: Option<f32>,
}

impl Cli {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            cfg.apply_override(kv)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One-line JSON diagnostic for a failed command.
pub fn diagnostic(err: &Error) -> String {
    json!({"status": "error", "kind": err.kind(), "message": err.to_string()}).to_string()
}

fn emit(record: serde_json::Value) {
    println!("{record}");
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            std::process::exit(0)
        }
        _ => Error::Config(e.to_string().lines().next().unwrap_or_default().to_string()),
    })?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, &cfg))
}

fn dispatch(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    match &cli.command {
        Command::Gen { out } => cmd_gen(cfg, out.as_deref().unwrap_or(&cfg.data_dir)).map(drop),
        Command::Train { data, out } => cmd_train(
            cfg,
            data.as_deref().unwrap_or(&cfg.data_dir),
            out.as_deref().unwrap_or(&cfg.run_dir),
        )
        .map(drop),
        Command::Predict {
            checkpoint,
            input,
            prob_out,
            mask_out,
            threshold,
        } => cmd_predict(
            cfg,
            checkpoint,
            input,
            prob_out,
            mask_out,
            threshold.unwrap_or(cfg.postproc.threshold),
        ),
        Command::Postprocess(args) => cmd_postprocess(cfg, args),
        Command::Eval { pred, truth, json } => cmd_eval(pred, truth, json.as_deref()).map(drop),
        Command::Overlay {
            image,
            truth,
            pred,
            out,
            labeled_only,
        } => {
            let n = write_overlay(
                &read_volume(image)?,
                &read_volume(truth)?,
                &read_volume(pred)?,
                out,
                *labeled_only,
            )?;
            emit(json!({"status": "ok", "command": "overlay", "slices": n, "out": out}));
            Ok(())
        }
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let m = generate_dataset(cfg, out)?;
    emit(json!({
        "status": "ok",
        "command": "gen",
        "out": out,
        "volumes": m.volumes.len(),
        "counts": m.counts,
    }));
    Ok(m)
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let manifest = Manifest::load(data)?;
    let train_set = manifest.load_split(data, Split::Train)?;
    let validation = manifest.load_split(data, Split::Validation)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut line = |v: serde_json::Value| -> Result<()> {
        writeln!(log, "{v}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))
    };
    line(json!({
        "event": "start",
        "seed": cfg.seed,
        "train_volumes": train_set.len(),
        "validation_volumes": validation.len(),
        "config": cfg.to_json().as_object().map(|m| {
            m.iter()
                .filter(|(k, _)| !matches!(k.as_str(), "data_dir" | "run_dir" | "workers"))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect::<serde_json::Map<_, _>>()
        }),
    }))?;
    let best_path = out.join(BEST_CHECKPOINT);
    let outcome = train(cfg, &train_set, &validation, |rec, best| {
        if let Some(ckpt) = best {
            write_checkpoint(ckpt, &best_path)?;
        }
        let mut v = serde_json::to_value(rec)?;
        v["event"] = json!("epoch");
        line(v)
    })?;
    write_checkpoint(&outcome.last, out.join(FINAL_CHECKPOINT))?;
    line(json!({"event": "done", "best_epoch": outcome.best_epoch, "epochs": cfg.epochs}))?;
    emit(json!({
        "status": "ok",
        "command": "train",
        "best_epoch": outcome.best_epoch,
        "best": out.join(BEST_CHECKPOINT),
        "final": out.join(FINAL_CHECKPOINT),
        "log": log_path,
    }));
    Ok(outcome)
}

pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    prob_out: &Path,
    mask_out: &Path,
    threshold: f32,
) -> Result<()> {
    let ckpt = read_checkpoint(checkpoint)?;
    let patch = ckpt.params.config().input_patch_size;
    if patch != cfg.network.input_patch_size {
        return Err(Error::Config(format!(
            "checkpoint patch size {patch} differs from configured net.patch_size {}",
            cfg.network.input_patch_size
        )));
    }
    let image = read_volume(input)?;
    let prob = predict_volume(&ckpt.params, &image)?;
    let mask = binarize(&prob, threshold)?;
    write_volume(&prob, prob_out)?;
    write_volume(&mask, mask_out)?;
    emit(json!({
        "status": "ok",
        "command": "predict",
        "dims": image.dims(),
        "positive_voxels": mask.count_positive(),
        "prob": prob_out,
        "mask": mask_out,
    }));
    Ok(())
}

pub fn cmd_postprocess(cfg: &RunConfig, args: &PostprocessArgs) -> Result<()> {
    let input = read_volume(&args.input)?;
    let mask = match input.dtype() {
        Dtype::MaskU8 => input,
        Dtype::GrayF32 => binarize(&input, args.threshold.unwrap_or(cfg.postproc.threshold))?,
    };
    let connectivity = args.connectivity.unwrap_or(cfg.postproc.connectivity);
    let set = label_components(&mask, connectivity)?;
    let out = keep_largest(
        &set,
        args.keep.unwrap_or(cfg.postproc.keep),
        args.select_labels.as_deref(),
    )?;
    write_volume(&out, &args.output)?;
    let sizes: Vec<_> = set
        .sizes()
        .iter()
        .take(10)
        .map(|(l, n)| json!([l, n]))
        .collect();
    emit(json!({
        "status": "ok",
        "command": "postprocess",
        "components": set.count(),
        "largest": sizes,
        "kept_voxels": out.count_positive(),
        "output": args.output,
    }));
    Ok(())
}

pub fn cmd_eval(
    pred: &[PathBuf],
    truth: &[PathBuf],
    json_out: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let mut rows = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(truth) {
        let name = p.file_stem().map_or_else(
            || p.display().to_string(),
            |s| s.to_string_lossy().into_owned(),
        );
        rows.push((name, evaluate(&read_volume(p)?, &read_volume(t)?)?));
    }
    let reports: Vec<EvalReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    let macro_ = aggregate(&reports, Averaging::Macro)?;
    let micro = aggregate(&reports, Averaging::Micro)?;
    let mut table_rows = rows.clone();
    table_rows.push(("macro".into(), macro_.clone()));
    table_rows.push(("micro".into(), micro.clone()));
    print!("{}", format_table(&table_rows));
    let record = json!({
        "volumes": rows.iter().map(|(n, r)| json!({"name": n, "report": r})).collect::<Vec<_>>(),
        "macro": macro_,
        "micro": micro,
    });
    if let Some(path) = json_out {
        let mut text = serde_json::to_string_pretty(&record)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(reports)
}
