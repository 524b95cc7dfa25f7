//! `smcnca`: synthesize data, pretrain, probe, train, evaluate and plot.

mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use smcnca::checkpoint::ModelState;
use smcnca::config::sha256_hex;
use smcnca::dataio::{load_dataset, read_label_file, read_mapping, write_label_file};
use smcnca::eval::MetricReport;
use smcnca::synth::{write_dataset, SynthSpec};
use smcnca::train::{
    checkpoint_name, evaluate_model, linear_probe, pretrain_unsupervised, record_probe, run_semi_supervised,
    Phase, RunLog, RunOptions, TrainingData, VideoResult,
};
use smcnca::{validate_config, Ablation, ExperimentConfig};

#[derive(Parser)]
#[command(name = "smcnca", version, about = "Semi-supervised temporal action segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON). For `synth`, a synthetic-data spec.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Run name; artifacts go to `<runs-dir>/<name>/`.
    #[arg(long, global = true)]
    run: Option<String>,
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    labelled_fraction: Option<f64>,
    /// May be repeated.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablate: Vec<Ablation>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Record wall-clock seconds in log.csv (makes logs differ between runs).
    #[arg(long, global = true)]
    wall_clock: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to `--data`.
    Synth,
    /// Unsupervised pretraining with probe-based model selection.
    Pretrain,
    /// Linear probe on a checkpoint's frozen temporal embeddings.
    Probe {
        /// Defaults to the run's pretraining checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full schedule: pretraining and the semi-supervised iterations.
    Train,
    /// Score predictions against ground truth.
    Eval {
        /// Directory of predicted label files; compared against `--gt`.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Output CSV. Defaults to `<run>/eval/eval.csv`, or stdout when comparing directories.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SVG timelines and training curves.
    Plot {
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Output directory. Defaults to `<run>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: smcnca::Error| e.to_string())
}

/// CLI-level failures that map onto the config and data exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Data(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Config(_) => 2,
                Failure::Data(_) => 3,
            };
        }
        if let Some(e) = cause.downcast_ref::<smcnca::Error>() {
            if e.is_config_error() {
                return 2;
            }
            if e.is_data_error() {
                return 3;
            }
        }
    }
    4
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth => cmd_synth(g),
        Command::Pretrain => cmd_pretrain(g),
        Command::Probe { checkpoint } => cmd_probe(g, checkpoint.as_deref()),
        Command::Train => cmd_train(g),
        Command::Eval { pred, gt, out } => cmd_eval(g, pred.as_deref(), gt.as_deref(), out.as_deref()),
        Command::Plot { pred, gt, out } => cmd_plot(g, pred.as_deref(), gt.as_deref(), out.as_deref()),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Empties `dir` when overwriting, refuses when it already has content otherwise.
fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = dir.is_dir() && fs::read_dir(dir)?.next().is_some();
    if occupied {
        if !overwrite {
            bail!("{} already exists; pass --overwrite to replace it", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn require_data(g: &Global) -> Result<&Path> {
    g.data
        .as_deref()
        .ok_or_else(|| Failure::Data("--data is required".into()).into())
}

fn run_dir(g: &Global) -> Result<PathBuf> {
    let name = g
        .run
        .as_deref()
        .ok_or_else(|| Failure::Config("--run is required".into()))?;
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(Failure::Config(format!("invalid run name `{name}`")).into());
    }
    Ok(g.runs_dir.join(name))
}

/// Effective config: the file (or defaults), then flag overrides, then validation.
/// Also returns the hash of the config file as read.
fn load_config(g: &Global) -> Result<(ExperimentConfig, Option<String>)> {
    let (mut cfg, file_hash) = match &g.config {
        Some(path) => {
            let bytes = fs::read(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            let text = String::from_utf8(bytes.clone())
                .map_err(|_| Failure::Config(format!("{} is not UTF-8", path.display())))?;
            (ExperimentConfig::from_json_str(&text)?, Some(sha256_hex(&bytes)))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(seed) = g.seed {
        cfg.rng_seed = seed;
    }
    if let Some(f) = g.labelled_fraction {
        cfg.labelled_fraction = f;
    }
    for a in &g.ablate {
        a.apply(&mut cfg);
    }
    Ok((validate_config(cfg)?, file_hash))
}

fn load_training_data(root: &Path, cfg: &ExperimentConfig) -> Result<TrainingData> {
    let split = load_dataset(root, cfg.labelled_fraction, cfg.rng_seed)
        .with_context(|| format!("loading dataset {}", root.display()))?;
    Ok(TrainingData::prepare(&split, cfg)?)
}

struct Manifest {
    command: &'static str,
    started: u64,
    phases: Vec<(String, u64)>,
    artifacts: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            started: unix_now(),
            phases: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn phase(&mut self, name: &str) {
        self.phases.push((name.to_string(), unix_now()));
    }

    fn write(&self, dir: &Path, g: &Global, cfg: &ExperimentConfig, file_hash: Option<String>) -> Result<()> {
        let manifest = json!({
            "run": g.run,
            "command": self.command,
            "config_path": g.config,
            "config_file_sha256": file_hash,
            "config_hash": cfg.hash_hex(),
            "config": cfg,
            "dataset_root": g.data,
            "seed": cfg.rng_seed,
            "labelled_fraction": cfg.labelled_fraction,
            "ablations": g.ablate.iter().map(|a| a.name()).collect::<Vec<_>>(),
            "started_unix": self.started,
            "phases": self.phases.iter().map(|(p, t)| json!({"phase": p, "unix": t})).collect::<Vec<_>>(),
            "artifacts": self.artifacts,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }
}

fn cmd_synth(g: &Global) -> Result<()> {
    let out = require_data(g)?;
    let mut spec = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read spec {}: {e}", path.display())))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Failure::Config(format!("synth spec: {e}")))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    prepare_output_dir(out, g.overwrite)?;
    let data = write_dataset(&spec, out)?;
    println!(
        "wrote {} training and {} test videos ({} classes) to {}",
        data.train.len(),
        data.test.len(),
        data.class_names.len(),
        out.display()
    );
    Ok(())
}

fn write_metrics_json(path: &Path, overall: Option<MetricReport>, per_video: &[VideoResult]) -> Result<()> {
    let videos: BTreeMap<&str, Option<MetricReport>> =
        per_video.iter().map(|r| (r.video_id.as_str(), r.metrics)).collect();
    let doc = json!({ "mean": overall, "videos": videos });
    fs::write(path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn write_predictions(dir: &Path, results: &[VideoResult], class_names: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for r in results {
        write_label_file(&dir.join(format!("{}.txt", r.video_id)), &r.prediction, class_names)?;
    }
    Ok(())
}

const EVAL_HEADER: &str = "video,acc,edit,f1_10,f1_25,f1_50";

fn eval_csv(rows: &[(String, MetricReport)]) -> String {
    let line = |name: &str, m: &MetricReport| {
        let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.4}")).collect();
        format!("{name},{}\n", vals.join(","))
    };
    let mut out = format!("{EVAL_HEADER}\n");
    for (id, m) in rows {
        out.push_str(&line(id, m));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|(_, m)| *m).collect();
    out.push_str(&line("mean", &MetricReport::mean(&reports)));
    out
}

fn scored_rows(results: &[VideoResult]) -> Vec<(String, MetricReport)> {
    results
        .iter()
        .filter_map(|r| r.metrics.map(|m| (r.video_id.clone(), m)))
        .collect()
}

fn cmd_pretrain(g: &Global) -> Result<()> {
    let (cfg, file_hash) = load_config(g)?;
    let data = load_training_data(require_data(g)?, &cfg)?;
    let dir = run_dir(g)?;
    prepare_output_dir(&dir, g.overwrite)?;
    let mut manifest = Manifest::new("pretrain");
    let mut log = RunLog::new(RunOptions {
        out_dir: Some(dir.clone()),
        wall_clock_in_log: g.wall_clock,
        ..RunOptions::default()
    })?;
    manifest.phase("pretrain");
    let state = ModelState::init(&cfg, data.num_classes());
    let state = pretrain_unsupervised(state, &data, &mut log)?;
    let ckpt = checkpoint_name(Phase::Pretrain, 0);
    state.save(&dir.join(&ckpt), Phase::Pretrain.as_str())?;
    manifest.phase("probe");
    let probe = record_probe(&state, &data, &mut log)?;
    write_metrics_json(&dir.join("probe_metrics.json"), probe.metrics, &probe.per_video)?;
    manifest.artifacts = vec!["log.csv".into(), "timings.csv".into(), ckpt, "probe_metrics.json".into()];
    manifest.write(&dir, g, &cfg, file_hash)?;
    println!("selection accuracy {:.2}", probe.selection_accuracy);
    if let Some(m) = probe.metrics {
        println!("probe {m:?}");
    }
    Ok(())
}

fn cmd_probe(g: &Global, checkpoint: Option<&Path>) -> Result<()> {
    let dir = run_dir(g)?;
    let ckpt = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| dir.join(checkpoint_name(Phase::Pretrain, 0)));
    let (state, _) = ModelState::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut cfg = state.config.clone();
    if let Some(seed) = g.seed {
        cfg.rng_seed = seed;
    }
    if let Some(f) = g.labelled_fraction {
        cfg.labelled_fraction = f;
    }
    let cfg = validate_config(cfg)?;
    let data = load_training_data(require_data(g)?, &cfg)?;
    let out = dir.join("probe");
    prepare_output_dir(&out, g.overwrite)?;
    let probe = linear_probe(&state, &data)?;
    write_metrics_json(&out.join("metrics.json"), probe.metrics, &probe.per_video)?;
    write_predictions(&out.join("predictions"), &probe.per_video, &data.class_names)?;
    fs::write(out.join("eval.csv"), eval_csv(&scored_rows(&probe.per_video)))?;
    println!(
        "probe train accuracy {:.2}, held-out labelled accuracy {:.2}",
        probe.train_accuracy, probe.selection_accuracy
    );
    if let Some(m) = probe.metrics {
        println!("{m:?}");
    }
    Ok(())
}

fn cmd_train(g: &Global) -> Result<()> {
    let (cfg, file_hash) = load_config(g)?;
    let split = load_dataset(require_data(g)?, cfg.labelled_fraction, cfg.rng_seed)?;
    let dir = run_dir(g)?;
    prepare_output_dir(&dir, g.overwrite)?;
    let mut manifest = Manifest::new("train");
    manifest.phase("train");
    let outcome = run_semi_supervised(
        &split,
        &cfg,
        RunOptions {
            out_dir: Some(dir.clone()),
            wall_clock_in_log: g.wall_clock,
            ..RunOptions::default()
        },
    )?;
    manifest.phase("evaluate");
    outcome.state.save(&dir.join("model.bin"), outcome.selected.0.as_str())?;
    write_predictions(&dir.join("predictions"), &outcome.per_video, &split.class_names)?;
    write_metrics_json(&dir.join("metrics.json"), outcome.final_metrics, &outcome.per_video)?;
    fs::write(dir.join("eval.csv"), eval_csv(&scored_rows(&outcome.per_video)))?;
    let mut artifacts: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    artifacts.sort();
    manifest.artifacts = artifacts;
    manifest.write(&dir, g, &cfg, file_hash)?;
    println!(
        "selected state after {} iteration {}",
        outcome.selected.0.as_str(),
        outcome.selected.1
    );
    if let Some(m) = outcome.final_metrics {
        println!("{m:?}");
    }
    Ok(())
}

/// Label files of a directory as strings, keyed by video id.
fn read_label_dir(dir: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    if !dir.is_dir() {
        return Err(Failure::Data(format!("missing directory {}", dir.display())).into());
    }
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_none_or(|e| e != "txt") {
            continue;
        }
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let text = fs::read_to_string(&path)?;
        out.insert(id, text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    Ok(out)
}

/// Class names from `<data>/mapping.txt` when available, otherwise every name seen, sorted.
fn class_names_for(g: &Global, seen: &[&BTreeMap<String, Vec<String>>]) -> Result<Vec<String>> {
    if let Some(root) = &g.data {
        let mapping = root.join("mapping.txt");
        if mapping.exists() {
            return Ok(read_mapping(&mapping)?);
        }
    }
    let mut names: Vec<String> = seen
        .iter()
        .flat_map(|m| m.values().flatten().cloned())
        .collect();
    names.sort();
    names.dedup();
    Ok(names)
}

/// Matched prediction/ground-truth id sequences for every ground-truth video.
fn paired_labels(g: &Global, pred_dir: &Path, gt_dir: &Path) -> Result<(Vec<(String, Vec<usize>, Vec<usize>)>, Vec<String>)> {
    let pred = read_label_dir(pred_dir)?;
    let gt = read_label_dir(gt_dir)?;
    if gt.is_empty() {
        return Err(Failure::Data(format!("no ground-truth files in {}", gt_dir.display())).into());
    }
    let names = class_names_for(g, &[&pred, &gt])?;
    let lookup: std::collections::HashMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut pairs = Vec::new();
    for id in gt.keys() {
        if !pred.contains_key(id) {
            return Err(Failure::Data(format!("no prediction for `{id}` in {}", pred_dir.display())).into());
        }
        let p = read_label_file(&pred_dir.join(format!("{id}.txt")), &lookup)?;
        let t = read_label_file(&gt_dir.join(format!("{id}.txt")), &lookup)?;
        if p.len() != t.len() {
            return Err(Failure::Data(format!("`{id}`: {} predicted frames, {} ground-truth frames", p.len(), t.len())).into());
        }
        pairs.push((id.clone(), p, t));
    }
    Ok((pairs, names))
}

fn cmd_eval(g: &Global, pred: Option<&Path>, gt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (rows, default_out) = match (pred, gt) {
        (Some(pred), Some(gt)) => {
            let (pairs, _) = paired_labels(g, pred, gt)?;
            let rows = pairs
                .into_iter()
                .map(|(id, p, t)| Ok((id, MetricReport::compute(&p, &t, &Default::default())?)))
                .collect::<Result<Vec<_>>>()?;
            (rows, None)
        }
        _ => {
            let dir = run_dir(g)?;
            let (state, _) = ModelState::load(&dir.join("model.bin"))?;
            let mut cfg = state.config.clone();
            if let Some(f) = g.labelled_fraction {
                cfg.labelled_fraction = f;
            }
            let data = load_training_data(require_data(g)?, &validate_config(cfg)?)?;
            let (results, _) = evaluate_model(&state, &data)?;
            let eval_dir = dir.join("eval");
            prepare_output_dir(&eval_dir, g.overwrite)?;
            (scored_rows(&results), Some(eval_dir.join("eval.csv")))
        }
    };
    if rows.is_empty() {
        return Err(Failure::Data("nothing to evaluate".into()).into());
    }
    let csv = eval_csv(&rows);
    match out.map(Path::to_path_buf).or(default_out) {
        Some(path) => {
            if out.is_some() && path.exists() && !g.overwrite {
                bail!("{} already exists; pass --overwrite to replace it", path.display());
            }
            fs::write(&path, &csv)?;
            print!("{}", csv.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn read_log_series(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("empty log"))?.split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let wanted = ["l_total", "acc", "edit"];
    Ok(wanted
        .iter()
        .filter_map(|&name| {
            let col = header.iter().position(|h| *h == name)?;
            let values = rows
                .iter()
                .map(|r| r.get(col).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
                .collect();
            Some((name.to_string(), values))
        })
        .collect())
}

fn cmd_plot(g: &Global, pred: Option<&Path>, gt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let run = g.run.as_ref().map(|_| run_dir(g)).transpose()?;
    let out_dir = match (out, &run) {
        (Some(o), _) => o.to_path_buf(),
        (None, Some(r)) => r.join("plots"),
        (None, None) => return Err(Failure::Config("plot needs --out or --run".into()).into()),
    };
    let pred_dir = match (pred, &run) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(r)) => r.join("predictions"),
        (None, None) => return Err(Failure::Config("plot needs --pred or --run".into()).into()),
    };
    let gt_dir = match (gt, &g.data) {
        (Some(t), _) => t.to_path_buf(),
        (None, Some(d)) => d.join("groundTruth"),
        (None, None) => return Err(Failure::Config("plot needs --gt or --data".into()).into()),
    };
    let pred_ids = read_label_dir(&pred_dir)?;
    let gt_all = read_label_dir(&gt_dir)?;
    // Only videos that have predictions get a timeline.
    let filtered_gt = gt_with_predictions(&gt_all, &pred_ids);
    let names = class_names_for(g, &[&pred_ids, &filtered_gt])?;
    let lookup: std::collections::HashMap<&str, usize> =
        names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    prepare_output_dir(&out_dir, g.overwrite)?;
    let to_ids = |labels: &[String]| -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| lookup.get(l.as_str()).copied().ok_or_else(|| Failure::Data(format!("unknown label `{l}`")).into()))
            .collect()
    };
    let mut written = 0;
    for (id, p) in &pred_ids {
        let Some(t) = filtered_gt.get(id) else { continue };
        let svg = plot::timeline_svg(id, &to_ids(t)?, &to_ids(p)?, &names);
        fs::write(out_dir.join(format!("timeline_{id}.svg")), svg)?;
        written += 1;
    }
    if let Some(r) = &run {
        let log = r.join("log.csv");
        if log.exists() {
            let series = read_log_series(&log)?;
            fs::write(out_dir.join("curve.svg"), plot::curve_svg("training curve", &series))?;
            written += 1;
        }
    }
    if written == 0 {
        return Err(Failure::Data("no predictions matched any ground truth".into()).into());
    }
    println!("wrote {written} figures to {}", out_dir.display());
    Ok(())
}

fn gt_with_predictions(
    gt: &BTreeMap<String, Vec<String>>,
    pred: &BTreeMap<String, Vec<String>>,
) -> BTreeMap<String, Vec<String>> {
    gt.iter()
        .filter(|(id, _)| pred.contains_key(*id))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}
