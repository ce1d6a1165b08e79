//! Command-line workflow: generate datasets, train one variant, or run the
//! whole comparison. Every command writes its outputs plus a JSON manifest
//! (flag echo and SHA-256 of every file involved) into a single working
//! directory, and is byte-for-byte idempotent given identical flags.
//!
//! Files in the working directory:
//!   train.auxd / val.auxd            dataset containers
//!   gen_manifest.json                written by gen-data
//!   ckpt_<variant>_s<seed>.auxc      best checkpoint per training run
//!   report_<variant>_s<seed>.csv     per-epoch training report
//!   train_manifest_<variant>_s<seed>.json
//!   iou_table.csv / params_table.csv / wins.csv / compare_manifest.json

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{make_splits, read_dataset, write_dataset, Scene};
use crate::error::{AuxError, Result};
use crate::models::{save_checkpoint, CountMode, ModelGraph};
use crate::trainer::{train, TrainConfig, TrainReport, Variant};

pub const THREADS_ENV: &str = "AUXSEG_THREADS";

#[derive(Parser, Debug)]
#[command(name = "auxseg", version, about = "Auxiliary-task segmentation training at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate deterministic train/validation datasets.
    GenData(GenDataArgs),
    /// Train one variant on the generated datasets.
    Train(TrainArgs),
    /// Train the five accuracy variants over several seeds and emit the
    /// comparison tables.
    Compare(CompareArgs),
}

/// `--ema-beta <f|off>`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EmaFlag(pub Option<f64>);

impl FromStr for EmaFlag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("off") {
            return Ok(EmaFlag(None));
        }
        let beta: f64 = s
            .parse()
            .map_err(|_| format!("expected a decay in (0,1) or 'off', got {s:?}"))?;
        if !(beta > 0.0 && beta < 1.0) {
            return Err(format!("EMA decay must lie in (0,1), got {beta}"));
        }
        Ok(EmaFlag(Some(beta)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn is_on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args, Debug, Serialize)]
pub struct GenDataArgs {
    /// Dataset seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Training samples.
    #[arg(long, default_value_t = 512)]
    pub train: usize,
    /// Validation samples.
    #[arg(long, default_value_t = 128)]
    pub val: usize,
    /// Scene height (multiple of 8, at least 16).
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    /// Scene width (multiple of 8, at least 16).
    #[arg(long, default_value_t = 48)]
    pub width: usize,
    /// Working directory for datasets and artifacts.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Model/weighting variant to train.
    #[arg(long, value_enum)]
    pub variant: Variant,
    /// Model initialization seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Moving-average decay for adaptive weights, or 'off'.
    #[arg(long, default_value = "off")]
    pub ema_beta: EmaFlag,
    /// Treat loss-derived weights as batch constants (on) or differentiate
    /// through them (off).
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub detach: Switch,
    /// Working directory holding train.auxd/val.auxd; receives artifacts.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CompareArgs {
    /// Number of model seeds (1..=k) per variant.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value = "off")]
    pub ema_beta: EmaFlag,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub detach: Switch,
    /// Working directory holding train.auxd/val.auxd; receives artifacts.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Also print aligned text tables.
    #[arg(long, default_value_t = false)]
    pub pretty: bool,
}

// ── manifests ───────────────────────────────────────────────────────────

#[derive(Serialize)]
struct FileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<C: Serialize> {
    tool_version: &'static str,
    command: &'static str,
    config: C,
    datasets: Vec<FileEntry>,
    artifacts: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn file_entry(path: &Path) -> Result<FileEntry> {
    Ok(FileEntry { path: path.display().to_string(), sha256: sha256_file(path)? })
}

fn write_manifest<C: Serialize>(path: &Path, manifest: &RunManifest<C>) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| AuxError::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(path, json + "\n")?;
    Ok(())
}

// ── shared helpers ──────────────────────────────────────────────────────

pub fn train_path(out: &Path) -> PathBuf {
    out.join("train.auxd")
}

pub fn val_path(out: &Path) -> PathBuf {
    out.join("val.auxd")
}

fn load_split(path: &Path) -> Result<Vec<Scene>> {
    if !path.exists() {
        return Err(AuxError::InvalidArgument(format!(
            "missing dataset {}; run gen-data first",
            path.display()
        )));
    }
    read_dataset(path)
}

fn check_extents(height: usize, width: usize) -> Result<()> {
    if height % 8 != 0 {
        return Err(AuxError::InvalidArgument(format!(
            "height must be divisible by 8, got {height}"
        )));
    }
    if width % 8 != 0 {
        return Err(AuxError::InvalidArgument(format!(
            "width must be divisible by 8, got {width}"
        )));
    }
    Ok(())
}

/// Worker-pool parallelism cap: AUXSEG_THREADS when set, otherwise the
/// machine's available parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Run independent jobs on up to `thread_cap()` worker threads; results
/// come back in job order, so the outcome is schedule-independent.
pub fn run_jobs<T, F>(n_jobs: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = thread_cap().min(n_jobs).max(1);
    if workers == 1 {
        return (0..n_jobs).map(job).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n_jobs).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n_jobs {
                    break;
                }
                let out = job(i);
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("job completed"))
        .collect()
}

fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

// ── gen-data ────────────────────────────────────────────────────────────

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    check_extents(args.height, args.width)?;
    std::fs::create_dir_all(&args.out)?;
    let (train_set, val_set) = make_splits(args.seed, args.train, args.val, args.height, args.width)?;
    let train_file = train_path(&args.out);
    let val_file = val_path(&args.out);
    write_dataset(&train_set, &train_file)?;
    write_dataset(&val_set, &val_file)?;

    let manifest_path = args.out.join("gen_manifest.json");
    write_manifest(
        &manifest_path,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "gen-data",
            config: args,
            datasets: vec![file_entry(&train_file)?, file_entry(&val_file)?],
            artifacts: vec![],
        },
    )?;
    println!("{}", manifest_path.display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn train_config(
    variant: Variant,
    seed: u64,
    epochs: usize,
    batch: usize,
    lr: f64,
    ema: EmaFlag,
    detach: Switch,
) -> TrainConfig {
    let mut config = TrainConfig::new(variant, seed);
    config.epochs = epochs;
    config.batch_size = batch;
    config.lr = lr;
    config.ema_beta = ema.0;
    config.detached = detach.is_on();
    config
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let train_file = train_path(&args.out);
    let val_file = val_path(&args.out);
    let train_set = load_split(&train_file)?;
    let val_set = load_split(&val_file)?;
    let config = train_config(
        args.variant,
        args.seed,
        args.epochs,
        args.batch,
        args.lr,
        args.ema_beta,
        args.detach,
    );
    let (model, report) = train(&config, &train_set, &val_set)?;

    let tag = format!("{}_s{}", args.variant.name(), args.seed);
    let ckpt_file = args.out.join(format!("ckpt_{tag}.auxc"));
    let report_file = args.out.join(format!("report_{tag}.csv"));
    save_checkpoint(&model, &ckpt_file)?;
    std::fs::write(&report_file, report.to_csv())?;

    let manifest_path = args.out.join(format!("train_manifest_{tag}.json"));
    write_manifest(
        &manifest_path,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "train",
            config: args,
            datasets: vec![file_entry(&train_file)?, file_entry(&val_file)?],
            artifacts: vec![file_entry(&ckpt_file)?, file_entry(&report_file)?],
        },
    )?;
    let best = &report.epochs[report.best_epoch - 1];
    println!(
        "{} seed {}: best epoch {} val_L_seg {} val_miou {}",
        args.variant.name(),
        args.seed,
        report.best_epoch,
        fmt9(best.val_seg_loss),
        fmt9(best.val_mean_iou),
    );
    println!("{}", manifest_path.display());
    Ok(())
}

// ── compare ─────────────────────────────────────────────────────────────

pub struct CompareOutcome {
    /// Best-epoch validation metrics per (variant, seed), in
    /// `Variant::TRAINED` x seed order.
    pub results: Vec<(Variant, u64, TrainReport)>,
    pub num_classes: usize,
}

impl CompareOutcome {
    fn best_row(&self, variant: Variant, seed: u64) -> &crate::trainer::EpochRow {
        let report = &self
            .results
            .iter()
            .find(|(v, s, _)| *v == variant && *s == seed)
            .expect("result present")
            .2;
        &report.epochs[report.best_epoch - 1]
    }

    pub fn mean_miou(&self, variant: Variant, seeds: u64) -> f64 {
        (1..=seeds).map(|s| self.best_row(variant, s).val_mean_iou).sum::<f64>() / seeds as f64
    }

    pub fn wins_vs_segnet(&self, variant: Variant, seeds: u64) -> usize {
        (1..=seeds)
            .filter(|&s| {
                self.best_row(variant, s).val_mean_iou
                    > self.best_row(Variant::Segnet, s).val_mean_iou
            })
            .count()
    }
}

/// Train every accuracy variant over seeds 1..=k. Runs are independent and
/// distributed over the worker pool.
pub fn run_compare_trainings(
    train_set: &[Scene],
    val_set: &[Scene],
    seeds: u64,
    make_config: impl Fn(Variant, u64) -> TrainConfig + Sync,
) -> Result<CompareOutcome> {
    let jobs: Vec<(Variant, u64)> = Variant::TRAINED
        .iter()
        .flat_map(|&v| (1..=seeds).map(move |s| (v, s)))
        .collect();
    let outputs = run_jobs(jobs.len(), |i| {
        let (variant, seed) = jobs[i];
        train(&make_config(variant, seed), train_set, val_set).map(|(_, report)| report)
    });
    let mut results = Vec::with_capacity(jobs.len());
    for ((variant, seed), out) in jobs.into_iter().zip(outputs) {
        results.push((variant, seed, out?));
    }
    let num_classes = results[0].2.num_classes;
    Ok(CompareOutcome { results, num_classes })
}

fn iou_table_csv(outcome: &CompareOutcome, seeds: u64) -> String {
    let k = outcome.num_classes;
    let mut out = String::from("variant,seed,val_miou");
    for c in 0..k {
        out.push_str(&format!(",val_iou_class{c}"));
    }
    out.push('\n');
    for &variant in &Variant::TRAINED {
        for seed in 1..=seeds {
            let row = outcome.best_row(variant, seed);
            out.push_str(&format!("{},{seed},{}", variant.name(), fmt9(row.val_mean_iou)));
            for c in 0..k {
                match row.val_iou[c] {
                    Some(v) => out.push_str(&format!(",{}", fmt9(v))),
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        // per-variant mean row over seeds; classes absent in a run are
        // averaged over the runs that have them
        out.push_str(&format!(
            "{},mean,{}",
            variant.name(),
            fmt9(outcome.mean_miou(variant, seeds))
        ));
        for c in 0..k {
            let vals: Vec<f64> = (1..=seeds)
                .filter_map(|s| outcome.best_row(variant, s).val_iou[c])
                .collect();
            if vals.is_empty() {
                out.push_str(",-");
            } else {
                out.push_str(&format!(",{}", fmt9(vals.iter().sum::<f64>() / vals.len() as f64)));
            }
        }
        out.push('\n');
    }
    out
}

fn params_table_csv(num_classes: usize) -> Result<String> {
    use crate::models::ModelKind;
    let mut out = String::from("model,train_params,inference_params\n");
    for kind in [ModelKind::SegNet, ModelKind::FuseNet, ModelKind::AuxNet] {
        let model = ModelGraph::build(kind, 3, num_classes, 32, 48, 0)?;
        out.push_str(&format!(
            "{},{},{}\n",
            kind.name(),
            model.param_count(CountMode::Training),
            model.param_count(CountMode::Inference),
        ));
    }
    Ok(out)
}

fn wins_csv(outcome: &CompareOutcome, seeds: u64) -> String {
    let mut out = String::from("variant,seed,val_miou,segnet_val_miou,win\n");
    for &variant in &Variant::TRAINED {
        if variant == Variant::Segnet {
            continue;
        }
        for seed in 1..=seeds {
            let aux = outcome.best_row(variant, seed).val_mean_iou;
            let base = outcome.best_row(Variant::Segnet, seed).val_mean_iou;
            out.push_str(&format!(
                "{},{seed},{},{},{}\n",
                variant.name(),
                fmt9(aux),
                fmt9(base),
                u8::from(aux > base)
            ));
        }
    }
    out
}

fn pretty_tables(outcome: &CompareOutcome, seeds: u64, params_csv: &str) -> String {
    let k = outcome.num_classes;
    let mut out = String::new();
    out.push_str(&format!("{:<10} {:>9}", "variant", "mean_iou"));
    for c in 0..k {
        out.push_str(&format!(" {:>9}", format!("class{c}")));
    }
    out.push('\n');
    for &variant in &Variant::TRAINED {
        out.push_str(&format!(
            "{:<10} {:>9.4}",
            variant.name(),
            outcome.mean_miou(variant, seeds)
        ));
        for c in 0..k {
            let vals: Vec<f64> = (1..=seeds)
                .filter_map(|s| outcome.best_row(variant, s).val_iou[c])
                .collect();
            if vals.is_empty() {
                out.push_str(&format!(" {:>9}", "-"));
            } else {
                out.push_str(&format!(" {:>9.4}", vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        out.push('\n');
    }
    out.push('\n');
    out.push_str(&format!("{:<10} {:>12} {:>12}\n", "model", "train", "inference"));
    for line in params_csv.lines().skip(1) {
        let mut fields = line.split(',');
        let (v, t, i) = (
            fields.next().unwrap_or(""),
            fields.next().unwrap_or(""),
            fields.next().unwrap_or(""),
        );
        out.push_str(&format!("{v:<10} {t:>12} {i:>12}\n"));
    }
    out
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(AuxError::InvalidArgument("--seeds must be at least 1".into()));
    }
    let train_file = train_path(&args.out);
    let val_file = val_path(&args.out);
    let train_set = load_split(&train_file)?;
    let val_set = load_split(&val_file)?;

    let outcome = run_compare_trainings(&train_set, &val_set, args.seeds, |variant, seed| {
        train_config(variant, seed, args.epochs, args.batch, args.lr, args.ema_beta, args.detach)
    })?;

    let iou_file = args.out.join("iou_table.csv");
    let params_file = args.out.join("params_table.csv");
    let wins_file = args.out.join("wins.csv");
    let params_csv = params_table_csv(outcome.num_classes)?;
    std::fs::write(&iou_file, iou_table_csv(&outcome, args.seeds))?;
    std::fs::write(&params_file, &params_csv)?;
    std::fs::write(&wins_file, wins_csv(&outcome, args.seeds))?;

    let manifest_path = args.out.join("compare_manifest.json");
    write_manifest(
        &manifest_path,
        &RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: "compare",
            config: args,
            datasets: vec![file_entry(&train_file)?, file_entry(&val_file)?],
            artifacts: vec![
                file_entry(&iou_file)?,
                file_entry(&params_file)?,
                file_entry(&wins_file)?,
            ],
        },
    )?;

    if args.pretty {
        print!("{}", pretty_tables(&outcome, args.seeds, &params_csv));
    }
    for &variant in &Variant::TRAINED {
        if variant == Variant::Segnet {
            continue;
        }
        println!(
            "{} aux_wins={}/{}",
            variant.name(),
            outcome.wins_vs_segnet(variant, args.seeds),
            args.seeds
        );
    }
    println!("{}", manifest_path.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Compare(args) => cmd_compare(args),
    }
}
