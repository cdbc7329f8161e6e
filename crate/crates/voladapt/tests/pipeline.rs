//! End-to-end checks of the command-line surface: artifact layout, run
//! metadata, exit codes, and the config-round-trip guarantee.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;
use voladapt::data::{self, Provenance};
use voladapt::net::ModelConfig;

fn voladapt(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voladapt"))
        .args(args)
        .current_dir(root)
        .output()
        .expect("spawn voladapt")
}

fn run_ok(root: &Path, args: &[&str]) {
    let output = voladapt(root, args);
    assert!(
        output.status.success(),
        "`voladapt {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

/// Writes the smoke-scale config files into `root` and returns their names.
fn write_configs(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let synth = root.join("synth.json");
    common::write_json(
        &synth,
        &serde_json::json!({ "synth": common::micro_synth_config(11) }),
    );
    let model = root.join("model.json");
    common::write_json(&model, &ModelConfig::micro());
    let train = root.join("train.json");
    common::write_json(&train, &common::micro_train_config(11));
    (synth, model, train)
}

#[test]
fn full_pipeline_produces_expected_artifacts() {
    let dir = tempdir().expect("tempdir");
    let root = dir.path();
    write_configs(root);

    run_ok(root, &["synth-data", "--config", "synth.json", "--out-dir", "raw"]);
    for name in [
        "train_a.jsonl",
        "train_b_labeled.jsonl",
        "train_b_unlabeled.jsonl",
        "train_labeled.jsonl",
        "val.jsonl",
        "b_unlabeled.truth.jsonl",
        "run-metadata.json",
    ] {
        assert!(root.join("raw").join(name).is_file(), "missing raw/{name}");
    }

    // Snapshot an input the later stages read; nothing may mutate it.
    let train_manifest_before = std::fs::read(root.join("raw/train_labeled.jsonl")).unwrap();

    for (manifest, out_dir) in [
        ("raw/train_labeled.jsonl", "pp_train"),
        ("raw/train_b_unlabeled.jsonl", "pp_unlabeled"),
        ("raw/val.jsonl", "pp_val"),
    ] {
        run_ok(
            root,
            &[
                "preprocess",
                "--manifest",
                manifest,
                "--out-dir",
                out_dir,
                "--target-shape",
                "8,16,16",
                "--workers",
                "1",
            ],
        );
        assert!(root.join(out_dir).join("preprocessed.jsonl").is_file());
        assert!(root.join(out_dir).join("run-metadata.json").is_file());
    }

    run_ok(
        root,
        &[
            "train-stage1",
            "--manifest",
            "pp_train/preprocessed.jsonl",
            "--model-config",
            "model.json",
            "--train-config",
            "train.json",
            "--out",
            "stage1.ckpt",
        ],
    );
    assert!(root.join("stage1.ckpt").is_file());

    // The per-epoch log must hold one record per configured epoch and carry
    // the determinism marker.
    let log_text = std::fs::read_to_string(root.join("stage1.ckpt.log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log_text
        .lines()
        .map(|l| serde_json::from_str(l).expect("log line"))
        .collect();
    let epochs = common::micro_train_config(11).epochs;
    assert_eq!(records.len(), epochs, "one log record per epoch");
    for (i, rec) in records.iter().enumerate() {
        assert_eq!(rec["epoch"].as_u64().unwrap() as usize, i);
        assert!(rec["lr"].as_f64().unwrap() > 0.0);
        assert!(rec["loss"].as_f64().unwrap().is_finite());
    }

    // Run metadata: versioned schema, config digest, seeds, wall time.
    let meta = read_json(&root.join("stage1.ckpt.run.json"));
    assert_eq!(meta["schema"], "v1");
    assert_eq!(meta["command"], "train-stage1");
    assert_eq!(meta["determinism"], "bit-exact");
    let sha = meta["config_sha256"].as_str().unwrap();
    assert_eq!(sha.len(), 64);
    assert!(sha.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(meta["seeds"]["train"].as_u64(), Some(11));
    assert!(meta["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    assert!(meta["effective_config"]["train"]["epochs"].as_u64().is_some());

    run_ok(
        root,
        &[
            "pseudo-label",
            "--checkpoint",
            "stage1.ckpt",
            "--manifest",
            "pp_unlabeled/preprocessed.jsonl",
            "--annotated",
            "pp_train/preprocessed.jsonl",
            "--threshold",
            "0.6",
            "--out",
            "stage2.jsonl",
        ],
    );
    let report = read_json(&root.join("stage2.jsonl.report.json"));
    let total = report["total_unlabeled"].as_u64().unwrap();
    let admitted = report["admitted"].as_u64().unwrap();
    assert_eq!(total, common::micro_synth_config(11).n_b_unlabeled as u64);
    assert!(admitted <= total);
    assert_eq!(report["threshold_used"].as_f64(), Some(0.6));
    let histogram: u64 = report["confidence_histogram"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(histogram, total, "histogram partitions the unlabeled pool");

    // The merged manifest preserves annotated rows and appends only
    // pseudo-labeled rows that clear the threshold.
    let merged = data::load_manifest(&root.join("stage2.jsonl")).unwrap();
    assert_eq!(merged.created_by, "stage2-merge");
    let annotated = data::load_manifest(&root.join("pp_train/preprocessed.jsonl")).unwrap();
    assert_eq!(merged.len(), annotated.len() + admitted as usize);
    for entry in &merged.entries[..annotated.len()] {
        assert_eq!(entry.label.provenance, Provenance::Human);
    }
    for entry in &merged.entries[annotated.len()..] {
        assert_eq!(entry.label.provenance, Provenance::Pseudo);
        assert!(entry.label.confidence.unwrap() >= 0.6);
    }

    run_ok(
        root,
        &[
            "train-stage2",
            "--manifest",
            "stage2.jsonl",
            "--init",
            "stage1",
            "--checkpoint",
            "stage1.ckpt",
            "--model-config",
            "model.json",
            "--train-config",
            "train.json",
            "--out",
            "stage2.ckpt",
            "--eval-manifest",
            "pp_val/preprocessed.jsonl",
        ],
    );
    let eval_report = read_json(&root.join("stage2.ckpt.report.json"));
    let f1 = eval_report["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));

    run_ok(
        root,
        &[
            "evaluate",
            "--checkpoint",
            "stage2.ckpt",
            "--manifest",
            "pp_val/preprocessed.jsonl",
            "--out",
            "report.json",
        ],
    );
    let standalone = read_json(&root.join("report.json"));
    assert_eq!(
        standalone["macro_f1"].as_f64(),
        eval_report["macro_f1"].as_f64(),
        "evaluate and --eval-manifest agree on the same checkpoint"
    );
    let n = standalone["n"].as_u64().unwrap();
    assert_eq!(n, common::micro_synth_config(11).n_val as u64);

    // No stage mutated its inputs.
    assert_eq!(
        std::fs::read(root.join("raw/train_labeled.jsonl")).unwrap(),
        train_manifest_before,
        "pipeline stages must not rewrite their inputs"
    );
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = tempdir().expect("tempdir");
    let root = dir.path();
    write_configs(root);

    run_ok(root, &["synth-data", "--config", "synth.json", "--out-dir", "raw"]);
    run_ok(
        root,
        &[
            "preprocess",
            "--manifest",
            "raw/train_labeled.jsonl",
            "--out-dir",
            "pp",
            "--target-shape",
            "8,16,16",
            "--workers",
            "1",
        ],
    );
    run_ok(
        root,
        &[
            "train-stage1",
            "--manifest",
            "pp/preprocessed.jsonl",
            "--model-config",
            "model.json",
            "--train-config",
            "train.json",
            "--out",
            "first.ckpt",
        ],
    );

    // Feed the emitted effective config back without the section files; the
    // run must reproduce bit for bit.
    let meta = read_json(&root.join("first.ckpt.run.json"));
    common::write_json(&root.join("effective.json"), &meta["effective_config"]);
    run_ok(
        root,
        &[
            "train-stage1",
            "--config",
            "effective.json",
            "--manifest",
            "pp/preprocessed.jsonl",
            "--out",
            "second.ckpt",
        ],
    );
    assert_eq!(
        std::fs::read(root.join("first.ckpt")).unwrap(),
        std::fs::read(root.join("second.ckpt")).unwrap(),
        "identical effective config must yield an identical checkpoint"
    );

    // Scratch-initialized stage 2 on the same manifest and settings performs
    // the same optimization; only the recorded stage differs.
    run_ok(
        root,
        &[
            "train-stage2",
            "--manifest",
            "pp/preprocessed.jsonl",
            "--init",
            "scratch",
            "--config",
            "effective.json",
            "--out",
            "scratch.ckpt",
        ],
    );
    let (mut from_scratch, stage) = voladapt::train::load_checkpoint(
        &root.join("scratch.ckpt"),
        Some(&ModelConfig::micro()),
    )
    .unwrap();
    assert_eq!(stage, voladapt::train::TrainingStage::Stage2);
    let (mut stage1, _) =
        voladapt::train::load_checkpoint(&root.join("first.ckpt"), Some(&ModelConfig::micro()))
            .unwrap();
    let bits = |state: &mut voladapt::net::ModelState| {
        let mut out = Vec::new();
        state.visit_params(&mut |_, _, p, _| out.extend(p.iter().map(|x| x.to_bits())));
        out
    };
    assert_eq!(
        bits(&mut from_scratch),
        bits(&mut stage1),
        "scratch stage-2 equals stage-1 when data and settings match"
    );
}

#[test]
fn score_reports_offline_metrics() {
    let dir = tempdir().expect("tempdir");
    let root = dir.path();
    std::fs::write(
        root.join("truth.csv"),
        "id,label\ns0,1\ns1,0\ns2,1\ns3,0\ns4,1\n",
    )
    .unwrap();
    // Three hits, one false positive, one false negative.
    std::fs::write(
        root.join("preds.csv"),
        "id,label\ns4,1\ns3,1\ns2,0\ns1,0\ns0,1\n",
    )
    .unwrap();
    run_ok(
        root,
        &[
            "score",
            "--preds",
            "preds.csv",
            "--truth",
            "truth.csv",
            "--out",
            "score.json",
        ],
    );
    let report = read_json(&root.join("score.json"));
    // tp=2, fp=1, fn=1, tn=1: f1_covid = 4/6, f1_non_covid = 2/4.
    assert_eq!(report["confusion"]["true_pos"].as_u64(), Some(2));
    assert_eq!(report["confusion"]["false_pos"].as_u64(), Some(1));
    assert_eq!(report["confusion"]["false_neg"].as_u64(), Some(1));
    assert_eq!(report["confusion"]["true_neg"].as_u64(), Some(1));
    let expected = (4.0 / 6.0 + 2.0 / 4.0) / 2.0;
    assert_eq!(report["macro_f1"].as_f64(), Some(expected));

    // Stdout fallback when --out is omitted.
    let output = voladapt(root, &["score", "--preds", "preds.csv", "--truth", "truth.csv"]);
    assert!(output.status.success());
    let printed: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("score prints a JSON report");
    assert_eq!(printed["macro_f1"].as_f64(), Some(expected));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempdir().expect("tempdir");
    let root = dir.path();

    // 0: help.
    assert_eq!(voladapt(root, &["--help"]).status.code(), Some(0));

    // 2: usage errors, from clap.
    assert_eq!(voladapt(root, &[]).status.code(), Some(2));
    assert_eq!(
        voladapt(root, &["train-stage1", "--bogus-flag"]).status.code(),
        Some(2)
    );

    // 1: pipeline failures, one `error[Category] message` line on stderr.
    let missing = voladapt(
        root,
        &[
            "evaluate",
            "--checkpoint",
            "nope.ckpt",
            "--manifest",
            "nope.jsonl",
            "--out",
            "r.json",
        ],
    );
    assert_eq!(missing.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&missing.stderr);
    assert!(
        stderr.starts_with("error[CheckpointMissing]"),
        "got: {stderr}"
    );

    let bad_key = voladapt(
        root,
        &[
            "synth-data",
            "--set",
            "synth.not_a_field=3",
            "--out-dir",
            "raw",
        ],
    );
    assert_eq!(bad_key.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&bad_key.stderr).starts_with("error[ConfigError]"),
        "unknown config keys are rejected"
    );

    let bad_csv = root.join("bad.csv");
    std::fs::write(&bad_csv, "sample,prediction\na,1\n").unwrap();
    let score = voladapt(
        root,
        &[
            "score",
            "--preds",
            bad_csv.to_str().unwrap(),
            "--truth",
            bad_csv.to_str().unwrap(),
        ],
    );
    assert_eq!(score.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&score.stderr).starts_with("error[ScoreInputError]"),
        "csv header must be `id,label`"
    );
}

#[test]
fn synth_data_is_reproducible_across_processes() {
    let dir = tempdir().expect("tempdir");
    let root = dir.path();
    write_configs(root);
    run_ok(root, &["synth-data", "--config", "synth.json", "--out-dir", "one"]);
    run_ok(root, &["synth-data", "--config", "synth.json", "--out-dir", "two"]);

    let snapshot = |sub: &str| -> BTreeMap<String, Vec<u8>> {
        let mut files = BTreeMap::new();
        let base = root.join(sub);
        let mut stack = vec![base.clone()];
        while let Some(current) = stack.pop() {
            for entry in std::fs::read_dir(&current).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().unwrap() != "run-metadata.json" {
                    // Metadata embeds wall time; everything else must match.
                    let key = path.strip_prefix(&base).unwrap().display().to_string();
                    files.insert(key, std::fs::read(&path).unwrap());
                }
            }
        }
        files
    };
    let one = snapshot("one");
    assert!(!one.is_empty());
    assert_eq!(one, snapshot("two"), "same seed, same bytes");
}
