use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smcnca::dataio::load_dataset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smcnca"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn smcnca")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_json(path: &Path, value: serde_json::Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path.to_path_buf()
}

fn small_spec(dir: &Path) -> PathBuf {
    write_json(
        &dir.join("spec.json"),
        serde_json::json!({
            "num_videos": 6,
            "num_test_videos": 2,
            "frames_per_video": 96,
            "num_classes": 3,
            "feature_dim": 4,
            "mean_segment_length": 16.0,
            "seed": 7
        }),
    )
}

fn small_config(dir: &Path) -> PathBuf {
    write_json(
        &dir.join("config.json"),
        serde_json::json!({
            "feature_dim": 4,
            "embedding_dim": 6,
            "hidden_channels": 6,
            "semantic_hidden": 6,
            "scorer_hidden": 6,
            "encoder_depth": 1,
            "downsample_length": 32,
            "frames_per_video": 8,
            "batch_videos": 3,
            "nca_window": 4,
            "nca_partners": 2,
            "iterations": 1,
            "epochs_pretrain": 2,
            "epochs_stage1": 2,
            "epochs_stage2": 2,
            "probe_epochs": 20
        }),
    )
}

fn with_data(tmp: &Path) -> PathBuf {
    let spec = small_spec(tmp);
    ok(tmp, &["synth", "--config", spec.to_str().unwrap(), "--data", "data"]);
    tmp.join("data")
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_default_layout_loads() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth", "--data", "d"]);
    let split = load_dataset(&tmp.path().join("d"), 0.05, 0).unwrap();
    assert_eq!(split.labelled.len() + split.unlabelled.len(), 40);
    assert_eq!(split.labelled.len(), 2);
}

#[test]
fn synth_is_reproducible_and_refuses_clobber() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = small_spec(tmp.path());
    let spec = spec.to_str().unwrap();
    ok(tmp.path(), &["synth", "--config", spec, "--data", "a"]);
    ok(tmp.path(), &["synth", "--config", spec, "--data", "b"]);
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    let again = run(tmp.path(), &["synth", "--config", spec, "--data", "a"]);
    assert!(!again.status.success());
    ok(tmp.path(), &["synth", "--config", spec, "--data", "a", "--overwrite"]);
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    ok(tmp.path(), &["synth", "--config", spec, "--data", "c", "--seed", "8"]);
    assert_ne!(tree(&tmp.path().join("a")), tree(&tmp.path().join("c")));
}

#[test]
fn synth_nineteen_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write_json(
        &tmp.path().join("s.json"),
        serde_json::json!({"num_videos": 2, "frames_per_video": 64, "num_classes": 19, "feature_dim": 3}),
    );
    ok(tmp.path(), &["synth", "--config", spec.to_str().unwrap(), "--data", "d"]);
    let mapping = fs::read_to_string(tmp.path().join("d/mapping.txt")).unwrap();
    assert_eq!(mapping.lines().count(), 19);
}

#[test]
fn train_writes_artifacts_and_threads_flags() {
    let tmp = tempfile::tempdir().unwrap();
    with_data(tmp.path());
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let args = [
        "train", "--config", cfg, "--data", "data", "--run", "r1", "--labelled-fraction", "0.05", "--seed", "3",
    ];
    ok(tmp.path(), &args);
    let dir = tmp.path().join("runs/r1");
    for f in [
        "log.csv",
        "timings.csv",
        "manifest.json",
        "metrics.json",
        "eval.csv",
        "model.bin",
        "ckpt_pretrain_0.bin",
        "ckpt_stage1_1.bin",
        "ckpt_stage2_1.bin",
    ] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["labelled_fraction"], 0.05);
    assert_eq!(manifest["seed"], 3);
    let file_hash = smcnca::config::sha256_hex(&fs::read(tmp.path().join("config.json")).unwrap());
    assert_eq!(manifest["config_file_sha256"], file_hash.as_str());
    // 6 training videos at 5% -> one labelled video.
    assert_eq!(manifest["config"]["labelled_fraction"], 0.05);
    assert!(dir.join("predictions/test_000.txt").exists());

    // Refuses to clobber; --overwrite reproduces the same log byte-for-byte.
    let first_log = fs::read(dir.join("log.csv")).unwrap();
    let again = run(tmp.path(), &args);
    assert_eq!(again.status.code(), Some(4));
    let mut with_overwrite = args.to_vec();
    with_overwrite.push("--overwrite");
    ok(tmp.path(), &with_overwrite);
    assert_eq!(fs::read(dir.join("log.csv")).unwrap(), first_log);
}

#[test]
fn no_nca_ablation_zeroes_column() {
    let tmp = tempfile::tempdir().unwrap();
    with_data(tmp.path());
    let cfg = small_config(tmp.path());
    ok(
        tmp.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--data", "data", "--run", "ab", "--ablate", "no-nca"],
    );
    let log = fs::read_to_string(tmp.path().join("runs/ab/log.csv")).unwrap();
    let mut lines = log.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "l_nca").unwrap();
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    for row in rows {
        assert_eq!(row.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0, "{row}");
    }
}

#[test]
fn pretrain_probe_eval_plot() {
    let tmp = tempfile::tempdir().unwrap();
    with_data(tmp.path());
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    ok(tmp.path(), &["pretrain", "--config", cfg, "--data", "data", "--run", "p"]);
    let run = tmp.path().join("runs/p");
    assert!(run.join("ckpt_pretrain_0.bin").exists());
    let log = fs::read_to_string(run.join("log.csv")).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("pretrain,")).count(), 2);
    assert!(log.lines().last().unwrap().starts_with("probe,"));

    ok(tmp.path(), &["probe", "--data", "data", "--run", "p"]);
    assert!(run.join("probe/metrics.json").exists());

    ok(tmp.path(), &["train", "--config", cfg, "--data", "data", "--run", "t"]);
    let out = ok(tmp.path(), &["eval", "--data", "data", "--run", "t"]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("mean,"));
    let csv = fs::read_to_string(tmp.path().join("runs/t/eval/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 + 1);

    ok(tmp.path(), &["plot", "--data", "data", "--run", "t"]);
    let plots = tmp.path().join("runs/t/plots");
    assert!(plots.join("timeline_test_000.svg").exists());
    let curve = fs::read_to_string(plots.join("curve.svg")).unwrap();
    let rows = fs::read_to_string(tmp.path().join("runs/t/log.csv")).unwrap().lines().count() - 1;
    assert!(curve.contains(&format!(r#"data-epochs="{rows}""#)));
}

#[test]
fn eval_identical_directories_scores_100() {
    let tmp = tempfile::tempdir().unwrap();
    let data = with_data(tmp.path());
    let gt = data.join("groundTruth");
    let out = ok(tmp.path(), &["eval", "--pred", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let last = stdout.lines().last().unwrap();
    assert_eq!(last, "mean,100.0000,100.0000,100.0000,100.0000,100.0000");
    assert_eq!(stdout.lines().count(), 1 + 8 + 1);
}

#[test]
fn plot_two_segment_video() {
    let tmp = tempfile::tempdir().unwrap();
    for d in ["p", "g"] {
        fs::create_dir_all(tmp.path().join(d)).unwrap();
    }
    fs::write(tmp.path().join("g/v.txt"), "cut\ncut\ncut\nmix\nmix\n").unwrap();
    fs::write(tmp.path().join("p/v.txt"), "cut\ncut\nmix\nmix\nmix\n").unwrap();
    ok(tmp.path(), &["plot", "--pred", "p", "--gt", "g", "--out", "figs"]);
    let svg = fs::read_to_string(tmp.path().join("figs/timeline_v.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), 4);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_json(&tmp.path().join("bad.json"), serde_json::json!({"scale_factor": 0.0}));
    let out = run(tmp.path(), &["train", "--config", bad.to_str().unwrap(), "--data", "nowhere", "--run", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let unknown = write_json(&tmp.path().join("unknown.json"), serde_json::json!({"no_such_key": 1}));
    let out = run(tmp.path(), &["train", "--config", unknown.to_str().unwrap(), "--data", "nowhere", "--run", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(tmp.path(), &["train", "--data", "nowhere", "--run", "x"]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(tmp.path(), &["train", "--labelled-fraction", "1.5", "--data", "nowhere", "--run", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
