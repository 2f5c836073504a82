//! Command-line entry point: synthetic dataset generation, training,
//! evaluation, the six-row ablation protocol, and the runtime self-check.
//!
//! Exit codes: 0 success, 2 configuration/schema errors, 3 training
//! divergence, 4 checkpoint architecture mismatch, 1 anything else.

use avdd_core::data::{self, Split, SynthConfig, VideoRecord};
use avdd_core::model::{self, ModelArch};
use avdd_core::selfcheck;
use avdd_core::tape::GradFault;
use avdd_core::trainer::{self, EpochRecord, TrainConfig, TrainError};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "avdd", version, about = "Audio-visual deepfake detection pipeline")]
struct Cli {
    /// JSON run configuration; defaults apply to every omitted field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the training and synthesis seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (manifest + binary feature files).
    GenSynth,
    /// Train on the manifest named in the config; writes checkpoint and logs.
    Train,
    /// Evaluate a checkpoint on one split of the manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        max_fpr: Option<f64>,
    },
    /// Retrain the six standard variants and emit the ablation table.
    Ablate,
    /// Run the built-in verification suite.
    Selfcheck {
        /// Corrupt one backward-pass operation to prove the gradient checks
        /// catch it (the run must then fail).
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
}

/// Paths consumed by train/eval.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct DataPaths {
    manifest: Option<PathBuf>,
}

/// The full run configuration: training and synthesis settings plus paths.
/// Every field has the reference default, so an empty file reproduces the
/// standard configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    train: TrainConfig,
    synth: SynthConfig,
    data: DataPaths,
    out_dir: PathBuf,
    threshold: f64,
    max_fpr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: DataPaths::default(),
            out_dir: PathBuf::from("runs/out"),
            threshold: 0.5,
            max_fpr: 0.1,
        }
    }
}

struct AppError {
    code: u8,
    msg: String,
}

impl AppError {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        AppError {
            code,
            msg: msg.into(),
        }
    }

    fn config(msg: impl Into<String>) -> Self {
        AppError::new(2, msg)
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Diverged { .. } => AppError::new(3, e.to_string()),
            TrainError::BadConfig(_) => AppError::new(2, e.to_string()),
            _ => AppError::new(1, e.to_string()),
        }
    }
}

impl From<model::ModelError> for AppError {
    fn from(e: model::ModelError) -> Self {
        match &e {
            model::ModelError::ArchMismatch { .. } => AppError::new(4, e.to_string()),
            _ => AppError::new(1, e.to_string()),
        }
    }
}

impl From<data::DataError> for AppError {
    fn from(e: data::DataError) -> Self {
        match &e {
            data::DataError::BadSynthConfig(_) => AppError::new(2, e.to_string()),
            _ => AppError::new(1, e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn quiet() -> bool {
    matches!(std::env::var("AVDD_LOG").as_deref(), Ok("quiet") | Ok("off"))
}

fn load_config(cli: &Cli) -> Result<RunConfig, AppError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                AppError::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| AppError::config(format!("invalid config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.train.validate().map_err(AppError::from)?;
    Ok(cfg)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), AppError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        AppError::new(
            1,
            format!("cannot create output directory {}: {e}", cfg.out_dir.display()),
        )
    })
}

/// Echo the effective configuration so the run can be reproduced from it.
fn echo_config(cfg: &RunConfig) -> Result<(), AppError> {
    let path = cfg.out_dir.join("config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&path, text)
        .map_err(|e| AppError::new(1, format!("cannot write {}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text)
        .map_err(|e| AppError::new(1, format!("cannot write {}: {e}", path.display())))
}

fn load_records(cfg: &RunConfig) -> Result<Vec<VideoRecord>, AppError> {
    let manifest = cfg.data.manifest.as_ref().ok_or_else(|| {
        AppError::config("missing required field data.manifest (path to the dataset manifest)")
    })?;
    Ok(data::load_manifest(manifest)?)
}

fn split_records(records: &[VideoRecord], split: Split) -> Vec<VideoRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

fn parse_split(s: &str) -> Result<Split, AppError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(AppError::config(format!(
            "unknown split {other:?} (expected train/val/test)"
        ))),
    }
}

fn run(cli: Cli) -> Result<(), AppError> {
    let cfg = load_config(&cli)?;
    match &cli.cmd {
        Cmd::GenSynth => cmd_gen_synth(&cfg),
        Cmd::Train => cmd_train(&cfg),
        Cmd::Eval {
            checkpoint,
            split,
            threshold,
            max_fpr,
        } => {
            let threshold = threshold.unwrap_or(cfg.threshold);
            let max_fpr = max_fpr.unwrap_or(cfg.max_fpr);
            cmd_eval(&cfg, checkpoint, parse_split(split)?, threshold, max_fpr)
        }
        Cmd::Ablate => cmd_ablate(&cfg),
        Cmd::Selfcheck { corrupt_grad } => cmd_selfcheck(*corrupt_grad),
    }
}

fn cmd_gen_synth(cfg: &RunConfig) -> Result<(), AppError> {
    ensure_out_dir(cfg)?;
    let data_dir = cfg.out_dir.join("data");
    std::fs::create_dir_all(&data_dir)
        .map_err(|e| AppError::new(1, format!("cannot create {}: {e}", data_dir.display())))?;
    let records = data::synth_generate(&cfg.synth)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in &records {
        let audio_name = format!("{}_a.bin", r.video_id);
        let visual_name = format!("{}_v.bin", r.video_id);
        data::write_feature_file(&data_dir.join(&audio_name), &r.audio_features)?;
        data::write_feature_file(&data_dir.join(&visual_name), &r.visual_features)?;
        rows.push((r.video_id.clone(), r.label, r.split, audio_name, visual_name));
    }
    let manifest = data_dir.join("manifest.csv");
    data::write_manifest(&manifest, &rows)?;
    let mut echo = cfg.clone();
    echo.data.manifest = Some(manifest.clone());
    echo_config(&echo)?;
    let count = |f: &dyn Fn(&&VideoRecord) -> bool| records.iter().filter(f).count();
    let summary = serde_json::json!({
        "manifest": manifest,
        "videos": records.len(),
        "real": count(&|r| r.label == 0),
        "fake": count(&|r| r.label == 1),
        "train": count(&|r| r.split == Split::Train),
        "val": count(&|r| r.split == Split::Val),
        "test": count(&|r| r.split == Split::Test),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), AppError> {
    ensure_out_dir(cfg)?;
    echo_config(cfg)?;
    let records = load_records(cfg)?;
    let train_set = split_records(&records, Split::Train);
    let val_set = split_records(&records, Split::Val);
    let verbose = !quiet();
    let started = Instant::now();
    let outcome = trainer::train(&cfg.train, &train_set, &val_set, &mut |rec: &EpochRecord| {
        if verbose {
            eprintln!(
                "epoch {:>3}  train loss {:.5}  val auc {:.4}  lr {:.3e}  [{:.1}s]",
                rec.epoch, rec.train.l_total, rec.val.auc, rec.lr, rec.wall_secs
            );
        }
    })?;
    let ckpt_path = cfg.out_dir.join("checkpoint.bin");
    model::save_checkpoint(&outcome.params, &ckpt_path)?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)
        .map_err(|e| AppError::new(1, format!("cannot write {}: {e}", log_path.display())))?;
    for rec in &outcome.log.epochs {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(log_file, "{line}")
            .map_err(|e| AppError::new(1, format!("cannot write {}: {e}", log_path.display())))?;
    }
    let best = &outcome.log.epochs[outcome.log.best_epoch - 1];
    write_json(&cfg.out_dir.join("val_report.json"), &best.val)?;
    if verbose {
        eprintln!(
            "finished: best epoch {} (val auc {:.4}) in {:.1}s; checkpoint at {}",
            outcome.log.best_epoch,
            outcome.log.best_val_auc,
            started.elapsed().as_secs_f64(),
            ckpt_path.display()
        );
    }
    println!("{}", serde_json::to_string(&best.val).expect("report serializes"));
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    threshold: f64,
    max_fpr: f64,
) -> Result<(), AppError> {
    let records = load_records(cfg)?;
    let params = model::load_checkpoint(checkpoint)?;
    let first = records
        .first()
        .ok_or_else(|| AppError::new(1, "manifest has no records"))?;
    let expected = ModelArch {
        d_audio: first.audio_features.cols(),
        d_visual: first.visual_features.cols(),
        hidden: cfg.train.hidden_dim,
        heads: cfg.train.heads,
        head_hidden: cfg.train.head_hidden,
        subspace_mode: cfg.train.subspace_mode,
    };
    model::check_arch(&params, &expected)?;
    let subset = split_records(&records, split);
    let report = trainer::evaluate(
        &params,
        &subset,
        split,
        cfg.train.seq_len_visual,
        threshold,
        max_fpr,
    )?;
    ensure_out_dir(cfg)?;
    write_json(
        &cfg.out_dir.join(format!("eval_{}.json", split.as_str())),
        &report,
    )?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<(), AppError> {
    ensure_out_dir(cfg)?;
    echo_config(cfg)?;
    let records = load_records(cfg)?;
    let train_set = split_records(&records, Split::Train);
    let val_set = split_records(&records, Split::Val);
    let test_set = split_records(&records, Split::Test);
    let verbose = !quiet();
    let rows = trainer::ablate(
        &cfg.train,
        &train_set,
        &val_set,
        &test_set,
        &mut |name, report| {
            if verbose {
                eprintln!(
                    "variant {name:>15}: test auc {:.4} eer {:.4}",
                    report.auc, report.eer
                );
            }
        },
    )?;
    let csv = ablation_csv(&rows);
    std::fs::write(cfg.out_dir.join("ablation.csv"), &csv)
        .map_err(|e| AppError::new(1, format!("cannot write ablation.csv: {e}")))?;
    write_json(&cfg.out_dir.join("ablation.json"), &rows)?;
    print!("{csv}");
    Ok(())
}

fn ablation_csv(rows: &[trainer::AblationRow]) -> String {
    let mut out = String::from("variant,auc,pauc,eer,acc,tpr,fpr\n");
    for row in rows {
        let r = &row.report;
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            row.name, r.auc, r.pauc, r.eer, r.acc, r.tpr, r.fpr
        ));
    }
    out
}

fn cmd_selfcheck(corrupt_grad: bool) -> Result<(), AppError> {
    let fault = corrupt_grad.then(|| GradFault {
        op: "tanh".into(),
        scale: 1.1,
    });
    let started = Instant::now();
    let results = selfcheck::run(fault);
    let mut failed = 0usize;
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("[{status}] {} — {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    println!(
        "{} checks, {} failed, {:.1}s",
        results.len(),
        failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(AppError::new(1, format!("{failed} self-checks failed")));
    }
    Ok(())
}
