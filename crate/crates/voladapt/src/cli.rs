//! Command-line entry point.
//!
//! One binary, one subcommand per pipeline stage: `synth-data`, `preprocess`,
//! `train-stage1`, `pseudo-label`, `train-stage2`, `evaluate`, and `score`.
//! Every run writes a versioned run-metadata JSON (effective config, its
//! SHA-256, seeds, artifact paths, wall time) beside its primary output, and
//! failures exit 1 with a one-line machine-parseable category on stderr;
//! usage errors exit 2.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{load_config, ConfigError, ConfigSources, PipelineConfig};
use crate::data::{self, DataError, DatasetManifest};
use crate::metrics::{self, MetricsError};
use crate::net::{build_model, NetError};
use crate::preprocess::{preprocess_dataset, PreprocessError};
use crate::pseudo::{generate_pseudo_labels, merge_for_stage2, predict_proba, PseudoError};
use crate::synth::{self, SynthError};
use crate::train::{
    load_checkpoint, save_checkpoint, train_model, TrainError, TrainLog, TrainingStage,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Data(#[from] DataError),
    #[error("{0}")]
    Preprocess(#[from] PreprocessError),
    #[error("{0}")]
    Net(#[from] NetError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Pseudo(#[from] PseudoError),
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Synth(#[from] SynthError),
    #[error("checkpoint not found: {}", .0.display())]
    CheckpointMissing(PathBuf),
    #[error("{0}")]
    Csv(String),
    #[error("worker pool setup failed: {0}")]
    Threads(String),
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("json encoding failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Stable one-word failure categories for scripts wrapping the binary.
fn category(err: &CliError) -> &'static str {
    match err {
        CliError::Config(_) => "ConfigError",
        CliError::Data(_) => "DataError",
        CliError::Preprocess(_) => "PreprocessError",
        CliError::Net(_) => "ModelError",
        CliError::Train(_) => "TrainError",
        CliError::Pseudo(_) => "PseudoError",
        CliError::Metrics(_) => "MetricsError",
        CliError::Synth(_) => "SynthError",
        CliError::CheckpointMissing(_) => "CheckpointMissing",
        CliError::Csv(_) => "ScoreInputError",
        CliError::Threads(_) => "WorkerError",
        CliError::Io(_) => "IoError",
        CliError::Json(_) => "EncodeError",
    }
}

#[derive(Parser)]
#[command(
    name = "voladapt",
    version,
    about = "Two-stage pseudo-label domain adaptation for 3D CT volume classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config flags shared by every stage that consumes configuration.
#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// Whole-pipeline JSON config file; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.base_lr=0.001`; repeatable,
    /// wins over every file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InitMode {
    /// Resume from the stage-1 checkpoint.
    Stage1,
    /// Random initialization from the training seed.
    Scratch,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic two-domain benchmark.
    SynthData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Resize volumes to the target shape and normalize intensities to [0,1].
    Preprocess {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Target shape as `D,H,W`; overrides the config section.
        #[arg(long)]
        target_shape: Option<String>,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train the stage-1 model on annotated data from both domains.
    TrainStage1 {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Model section replacement file.
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Train section replacement file.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSONL log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Pseudo-label an unlabeled pool and merge it with annotated data.
    PseudoLabel {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Unlabeled-pool manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Annotated manifest the admitted samples are merged into.
        #[arg(long)]
        annotated: PathBuf,
        /// Overrides the configured confidence threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Merged-manifest output path.
        #[arg(long)]
        out: PathBuf,
        /// Admission report; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the stage-2 model on the merged manifest.
    TrainStage2 {
        #[command(flatten)]
        config: ConfigArgs,
        /// Merged-manifest path.
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 checkpoint; required for `--init stage1`.
        #[arg(long, required_if_eq("init", "stage1"))]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InitMode::Stage1)]
        init: InitMode,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch JSONL log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// When given, evaluate the trained model on this manifest.
        #[arg(long)]
        eval_manifest: Option<PathBuf>,
        /// Metrics report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Score a checkpoint against a fully labeled manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Metrics report output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline scoring of prediction CSVs (columns: id,label).
    Score {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report path; prints to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses the CLI and runs the selected stage. Clap itself handles `--help`
/// (exit 0) and usage errors (exit 2).
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}] {err}", category(&err));
            ExitCode::from(1)
        }
    }
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    schema: &'a str,
    command: &'a str,
    config_sha256: String,
    seeds: BTreeMap<&'a str, u64>,
    artifacts: BTreeMap<&'a str, String>,
    wall_time_seconds: f64,
    determinism: &'a str,
    effective_config: &'a PipelineConfig,
}

/// Writes run metadata beside the primary output: into `run-metadata.json`
/// for directory outputs, `<file>.run.json` for file outputs.
fn write_metadata(
    primary: &Path,
    primary_is_dir: bool,
    command: &str,
    cfg: &PipelineConfig,
    artifacts: BTreeMap<&str, String>,
    started: Instant,
) -> Result<(), CliError> {
    let canonical = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&canonical);
    let mut config_sha256 = String::with_capacity(64);
    for byte in digest {
        config_sha256.push_str(&format!("{byte:02x}"));
    }
    let meta = RunMetadata {
        schema: "v1",
        command,
        config_sha256,
        seeds: BTreeMap::from([("train", cfg.train.seed), ("synth", cfg.synth.seed)]),
        artifacts,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        determinism: "bit-exact",
        effective_config: cfg,
    };
    let path = if primary_is_dir {
        primary.join("run-metadata.json")
    } else {
        sibling(primary, "run.json")
    };
    std::fs::write(&path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

/// `<path>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{name}.{suffix}"))
}

fn build_config(args: &ConfigArgs, sections: Vec<(&'static str, &Path)>) -> Result<PipelineConfig, CliError> {
    let cfg = load_config(&ConfigSources {
        file: args.config.as_deref(),
        sections,
        overrides: &args.set,
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn require_checkpoint(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::CheckpointMissing(path.to_path_buf()))
    }
}

/// Rewrites every volume ref to an absolute path so the manifest stays valid
/// when written to a different directory.
fn absolutize_refs(manifest: &mut DatasetManifest, manifest_path: &Path) -> Result<(), CliError> {
    let canonical = std::fs::canonicalize(manifest_path)?;
    for sample in &mut manifest.entries {
        let resolved = data::resolve_volume_ref(&canonical, &sample.volume_ref);
        sample.volume_ref = resolved.to_string_lossy().into_owned();
    }
    Ok(())
}

fn write_train_log(log: &TrainLog, path: &Path) -> Result<(), CliError> {
    let mut lines = String::new();
    for record in &log.epochs {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    std::fs::write(path, lines)?;
    Ok(())
}

fn run_training_stage(
    cfg: &PipelineConfig,
    state: crate::net::ModelState,
    manifest_path: &Path,
    stage: TrainingStage,
    out: &Path,
    log_path: Option<&Path>,
) -> Result<(crate::net::ModelState, TrainLog), CliError> {
    let manifest = data::load_manifest(manifest_path)?;
    let (mut trained, log) = train_model(state, &manifest, manifest_path, &cfg.train)?;
    save_checkpoint(&mut trained, stage, out)?;
    let default_log = sibling(out, "log.jsonl");
    write_train_log(&log, log_path.unwrap_or(&default_log))?;
    Ok((trained, log))
}

fn evaluate_to_file(
    state: &crate::net::ModelState,
    manifest_path: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let manifest = data::load_manifest(manifest_path)?;
    let report = metrics::evaluate(state, &manifest, manifest_path)?;
    std::fs::write(out, serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let started = Instant::now();
    match command {
        Command::SynthData { config, out_dir } => {
            let cfg = build_config(&config, Vec::new())?;
            let output = synth::generate(&cfg.synth, &out_dir)?;
            let artifacts = BTreeMap::from([
                ("train_a", output.train_a.display().to_string()),
                ("train_b_labeled", output.train_b_labeled.display().to_string()),
                ("train_b_unlabeled", output.train_b_unlabeled.display().to_string()),
                ("train_labeled", output.train_labeled.display().to_string()),
                ("val", output.val.display().to_string()),
                ("truth", output.truth.display().to_string()),
            ]);
            write_metadata(&out_dir, true, "synth-data", &cfg, artifacts, started)
        }
        Command::Preprocess {
            config,
            manifest,
            out_dir,
            target_shape,
            workers,
        } => {
            let mut cfg = build_config(&config, Vec::new())?;
            if let Some(spec) = target_shape {
                cfg.preprocess.target_shape = parse_shape(&spec)?;
            }
            let input = data::load_manifest(&manifest)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers.unwrap_or(0))
                .build()
                .map_err(|e| CliError::Threads(e.to_string()))?;
            let processed =
                pool.install(|| preprocess_dataset(&input, &manifest, &cfg.preprocess, &out_dir))?;
            let out_manifest = out_dir.join("preprocessed.jsonl");
            data::save_manifest(&processed, &out_manifest)?;
            let artifacts = BTreeMap::from([("manifest", out_manifest.display().to_string())]);
            write_metadata(&out_dir, true, "preprocess", &cfg, artifacts, started)
        }
        Command::TrainStage1 {
            config,
            manifest,
            model_config,
            train_config,
            out,
            log,
        } => {
            let sections = section_files(&model_config, &train_config);
            let cfg = build_config(&config, sections)?;
            let state = build_model(cfg.model.clone(), cfg.train.seed, None)?;
            run_training_stage(&cfg, state, &manifest, TrainingStage::Stage1, &out, log.as_deref())?;
            let artifacts = BTreeMap::from([
                ("checkpoint", out.display().to_string()),
                ("log", log.unwrap_or_else(|| sibling(&out, "log.jsonl")).display().to_string()),
            ]);
            write_metadata(&out, false, "train-stage1", &cfg, artifacts, started)
        }
        Command::PseudoLabel {
            config,
            checkpoint,
            manifest,
            annotated,
            threshold,
            out,
            report,
        } => {
            let mut cfg = build_config(&config, Vec::new())?;
            if let Some(t) = threshold {
                cfg.pseudo.confidence_threshold = t;
                cfg.pseudo.validate().map_err(PseudoError::from)?;
            }
            require_checkpoint(&checkpoint)?;
            let (state, _stage) = load_checkpoint(&checkpoint, None)?;

            let mut unlabeled = data::load_manifest(&manifest)?;
            let mut labeled = data::load_manifest(&annotated)?;
            // The merged manifest lands wherever --out points, so pin every
            // ref to an absolute path before merging.
            absolutize_refs(&mut unlabeled, &manifest)?;
            absolutize_refs(&mut labeled, &annotated)?;

            let preds = predict_proba(&state, &unlabeled, &manifest)?;
            let (admitted, admission_report) = generate_pseudo_labels(&preds, &cfg.pseudo)?;
            let merged = merge_for_stage2(&labeled, &unlabeled, &admitted)?;
            data::save_manifest(&merged, &out)?;
            let report_path = report.unwrap_or_else(|| sibling(&out, "report.json"));
            std::fs::write(&report_path, serde_json::to_vec_pretty(&admission_report)?)?;
            let artifacts = BTreeMap::from([
                ("merged_manifest", out.display().to_string()),
                ("report", report_path.display().to_string()),
            ]);
            write_metadata(&out, false, "pseudo-label", &cfg, artifacts, started)
        }
        Command::TrainStage2 {
            config,
            manifest,
            checkpoint,
            init,
            model_config,
            train_config,
            out,
            log,
            eval_manifest,
            report,
        } => {
            let sections = section_files(&model_config, &train_config);
            let cfg = build_config(&config, sections)?;
            let state = match init {
                InitMode::Stage1 => {
                    let path = checkpoint.expect("clap enforces --checkpoint for --init stage1");
                    require_checkpoint(&path)?;
                    load_checkpoint(&path, Some(&cfg.model))?.0
                }
                InitMode::Scratch => build_model(cfg.model.clone(), cfg.train.seed, None)?,
            };
            let (trained, _log) =
                run_training_stage(&cfg, state, &manifest, TrainingStage::Stage2, &out, log.as_deref())?;
            let mut artifacts = BTreeMap::from([
                ("checkpoint", out.display().to_string()),
                ("log", log.unwrap_or_else(|| sibling(&out, "log.jsonl")).display().to_string()),
            ]);
            if let Some(val) = eval_manifest {
                let report_path = report.unwrap_or_else(|| sibling(&out, "report.json"));
                evaluate_to_file(&trained, &val, &report_path)?;
                artifacts.insert("report", report_path.display().to_string());
            }
            write_metadata(&out, false, "train-stage2", &cfg, artifacts, started)
        }
        Command::Evaluate {
            checkpoint,
            manifest,
            out,
        } => {
            require_checkpoint(&checkpoint)?;
            let (state, _stage) = load_checkpoint(&checkpoint, None)?;
            evaluate_to_file(&state, &manifest, &out)?;
            let cfg = PipelineConfig::default();
            let artifacts = BTreeMap::from([("report", out.display().to_string())]);
            write_metadata(&out, false, "evaluate", &cfg, artifacts, started)
        }
        Command::Score { preds, truth, out } => {
            let pred_rows = read_label_csv(&preds)?;
            let truth_rows = read_label_csv(&truth)?;
            let (pred_codes, truth_codes) = join_by_id(&pred_rows, &truth_rows)?;
            let report = metrics::report(
                &metrics::labels_from_codes(&pred_codes)?,
                &metrics::labels_from_codes(&truth_codes)?,
            )?;
            let json = serde_json::to_vec_pretty(&report)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, json)?;
                    let cfg = PipelineConfig::default();
                    let artifacts = BTreeMap::from([("report", path.display().to_string())]);
                    write_metadata(&path, false, "score", &cfg, artifacts, started)?;
                }
                None => println!("{}", String::from_utf8_lossy(&json)),
            }
            Ok(())
        }
    }
}

fn section_files<'a>(
    model: &'a Option<PathBuf>,
    train: &'a Option<PathBuf>,
) -> Vec<(&'static str, &'a Path)> {
    let mut sections = Vec::new();
    if let Some(path) = model {
        sections.push(("model", path.as_path()));
    }
    if let Some(path) = train {
        sections.push(("train", path.as_path()));
    }
    sections
}

fn parse_shape(spec: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = spec.split(',').collect();
    let parse = |s: &str| s.trim().parse::<usize>().ok();
    match parts.as_slice() {
        [d, h, w] => match (parse(d), parse(h), parse(w)) {
            (Some(d), Some(h), Some(w)) => Ok([d, h, w]),
            _ => Err(CliError::Csv(format!(
                "--target-shape `{spec}`: components must be positive integers"
            ))),
        },
        _ => Err(CliError::Csv(format!(
            "--target-shape `{spec}`: expected D,H,W"
        ))),
    }
}

fn read_label_csv(path: &Path) -> Result<Vec<(String, i64)>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Csv(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "id,label" => {}
        _ => {
            return Err(CliError::Csv(format!(
                "{}: first line must be the header `id,label`",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, label) = line.split_once(',').ok_or_else(|| {
            CliError::Csv(format!("{}:{}: expected `id,label`", path.display(), no + 1))
        })?;
        let code = label.trim().parse::<i64>().map_err(|_| {
            CliError::Csv(format!(
                "{}:{}: label must be an integer class code",
                path.display(),
                no + 1
            ))
        })?;
        rows.push((id.trim().to_string(), code));
    }
    Ok(rows)
}

/// Pairs prediction and truth rows by id; both files must cover exactly the
/// same ids, in any order.
fn join_by_id(
    preds: &[(String, i64)],
    truths: &[(String, i64)],
) -> Result<(Vec<i64>, Vec<i64>), CliError> {
    let mut truth_map: BTreeMap<&str, i64> = BTreeMap::new();
    for (id, code) in truths {
        if truth_map.insert(id, *code).is_some() {
            return Err(CliError::Csv(format!("duplicate id `{id}` in truth file")));
        }
    }
    if preds.len() != truth_map.len() {
        return Err(CliError::Csv(format!(
            "prediction and truth id sets differ ({} predictions, {} truths)",
            preds.len(),
            truth_map.len()
        )));
    }
    let mut pred_codes = Vec::with_capacity(preds.len());
    let mut truth_codes = Vec::with_capacity(preds.len());
    let mut seen = std::collections::BTreeSet::new();
    for (id, code) in preds {
        let truth = truth_map
            .get(id.as_str())
            .ok_or_else(|| CliError::Csv(format!("id `{id}` missing from truth file")))?;
        if !seen.insert(id.as_str()) {
            return Err(CliError::Csv(format!("duplicate id `{id}` in predictions")));
        }
        pred_codes.push(*code);
        truth_codes.push(*truth);
    }
    Ok((pred_codes, truth_codes))
}
