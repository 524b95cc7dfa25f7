//! The training schedule: unsupervised pretraining with probe-based model selection,
//! then alternating supervised and pseudo-labelled contrastive stages.
//!
//! Every random draw is taken from a generator keyed by `(seed, phase, iteration,
//! epoch, batch)`, so a run is reproducible and any epoch can be replayed from a
//! checkpoint without carrying generator state.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::checkpoint::ModelState;
use crate::config::{ExperimentConfig, MaskMode, Schedule};
use crate::contrast::{dynamic_mask, input_cluster_mask, sample_indices, smc_loss_graph, LossWeights, PairMask, SampledBatch};
use crate::dataio::{downsample, upsample_predictions, DatasetSplit, FeatureSequence, HiddenLabels, LabelAudit};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::models::{classifier_logits, embed_temporal, softmax_rows, Network};
use crate::nca::{nca_loss_graph, sample_centers_partial};
use crate::optim::{param_grads, GroupHyper, Moments};
use crate::rng::{mix_seed, seeded_rng, Rng};

const SHUFFLE_STREAM: u64 = u64::MAX;
/// Held-out folds used to score a probe during pretraining model selection.
const MAX_PROBE_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Stage1,
    Stage2,
    Probe,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
            Phase::Probe => "probe",
        }
    }

    fn code(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Stage1 => 2,
            Phase::Stage2 => 3,
            Phase::Probe => 4,
        }
    }
}

/// Epoch-averaged loss components. Terms a phase does not use stay 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSnapshot {
    pub total: f64,
    pub ap_pos: f64,
    pub ap_neg: f64,
    pub aa_neg: f64,
    pub pp_neg: f64,
    pub nca: f64,
    pub ce: f64,
}

impl LossSnapshot {
    fn values(&self) -> [f64; 7] {
        [self.total, self.ap_pos, self.ap_neg, self.aa_neg, self.pp_neg, self.nca, self.ce]
    }

    fn from_values(v: [f64; 7]) -> Self {
        Self {
            total: v[0],
            ap_pos: v[1],
            ap_neg: v[2],
            aa_neg: v[3],
            pp_neg: v[4],
            nca: v[5],
            ce: v[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    fn mean(items: &[LossSnapshot]) -> LossSnapshot {
        if items.is_empty() {
            return LossSnapshot::default();
        }
        let mut sum = [0.0; 7];
        for it in items {
            for (s, v) in sum.iter_mut().zip(it.values()) {
                *s += v;
            }
        }
        Self::from_values(sum.map(|s| s / items.len() as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPhaseReport {
    pub phase: Phase,
    /// Outer iteration, 0 for pretraining and standalone probes.
    pub iter: usize,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    pub losses: LossSnapshot,
    pub metrics: Option<MetricReport>,
    pub seconds: f64,
}

pub const LOG_CSV_HEADER: &str =
    "phase,iter,epoch,l_total,l_ap_p,l_ap_n,l_aa_n,l_pp_n,l_nca,l_ce,acc,edit,f1_10,f1_25,f1_50,seconds";

impl TrainingPhaseReport {
    /// One `log.csv` row. Seconds are left empty unless `wall_clock` is set so that
    /// repeated runs produce identical logs.
    pub fn csv_row(&self, wall_clock: bool) -> String {
        let mut cols = vec![self.phase.as_str().to_string(), self.iter.to_string(), self.epoch.to_string()];
        cols.extend(self.losses.values().iter().map(|v| v.to_string()));
        match &self.metrics {
            Some(m) => cols.extend(m.values().iter().map(|v| v.to_string())),
            None => cols.extend(std::iter::repeat_n(String::new(), 5)),
        }
        cols.push(if wall_clock { format!("{:.3}", self.seconds) } else { String::new() });
        cols.join(",")
    }
}

/// One video at training resolution.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub video_id: String,
    pub features: Mat,
    /// Downsampled ground truth, present only for labelled videos.
    pub labels: Option<Vec<usize>>,
    /// Original-resolution ground truth that training may not read.
    pub hidden: Option<HiddenLabels>,
    pub t_original: usize,
}

impl PreparedVideo {
    fn new(seq: &FeatureSequence, hidden: Option<HiddenLabels>, cfg: &ExperimentConfig) -> Result<Self> {
        if seq.dim() != cfg.feature_dim {
            return Err(Error::Malformed {
                what: "dataset",
                detail: format!(
                    "video `{}` has {}-dim features but feature_dim = {}",
                    seq.video_id,
                    seq.dim(),
                    cfg.feature_dim
                ),
            });
        }
        let ds = downsample(seq, cfg.downsample_length);
        Ok(Self {
            video_id: seq.video_id.clone(),
            features: ds.features,
            labels: ds.labels,
            hidden,
            t_original: ds.t_original,
        })
    }
}

/// Downsampled training set D (sorted by id) and the evaluation videos.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub videos: Vec<PreparedVideo>,
    pub eval: Vec<PreparedVideo>,
    pub class_names: Vec<String>,
    pub audit: Arc<LabelAudit>,
}

impl TrainingData {
    pub fn prepare(split: &DatasetSplit, cfg: &ExperimentConfig) -> Result<Self> {
        let mut videos = Vec::with_capacity(split.labelled.len() + split.unlabelled.len());
        for s in &split.labelled {
            videos.push(PreparedVideo::new(s, None, cfg)?);
        }
        for h in &split.unlabelled {
            videos.push(PreparedVideo::new(&h.sequence, h.hidden.clone(), cfg)?);
        }
        videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let eval = split
            .eval_videos()
            .iter()
            .map(|h| PreparedVideo::new(&h.sequence, h.hidden.clone(), cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            videos,
            eval,
            class_names: split.class_names.clone(),
            audit: Arc::clone(&split.audit),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labelled(&self) -> Vec<usize> {
        (0..self.videos.len()).filter(|&i| self.videos[i].labels.is_some()).collect()
    }

    pub fn unlabelled(&self) -> Vec<usize> {
        (0..self.videos.len()).filter(|&i| self.videos[i].labels.is_none()).collect()
    }
}

/// Classifier predictions for one unlabelled video.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub labels: Vec<usize>,
    /// Max-softmax probability per frame.
    pub confidence: Vec<f64>,
}

impl PseudoLabels {
    /// Row-wise argmax with ties going to the lower class id.
    pub fn from_logits(logits: &Mat) -> Self {
        let probs = softmax_rows(logits);
        let labels = argmax_rows(logits);
        let confidence = labels.iter().enumerate().map(|(i, &c)| probs[[i, c]]).collect();
        Self { labels, confidence }
    }
}

/// Pseudo-labels keyed by index into [`TrainingData::videos`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabelStore {
    pub videos: BTreeMap<usize, PseudoLabels>,
}

pub fn argmax_rows(m: &Mat) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Multinomial logistic regression trained full-batch with Adam from zero weights.
///
/// Inputs are standardized per dimension for the fit and the scaling is folded back
/// into `w` and `b`, so the result does not depend on the scale of the features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    pub w: Mat,
    pub b: Mat,
}

impl SoftmaxRegression {
    pub fn fit(x: &Mat, y: &[usize], num_classes: usize, epochs: usize, lr: f64, weight_decay: f64) -> Result<Self> {
        let (n, d) = x.dim();
        if y.len() != n || n == 0 {
            return Err(Error::shape("SoftmaxRegression::fit", n, y.len()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {num_classes} classes")));
        }
        let mean = x.mean_axis(ndarray::Axis(0)).expect("n > 0");
        let std = x.std_axis(ndarray::Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let z = (x - &mean) / &std;
        let x = &z;
        let mut model = Self {
            w: Mat::zeros((d, num_classes)),
            b: Mat::zeros((1, num_classes)),
        };
        let mut mw = Moments::zeros(model.w.dim());
        let mut mb = Moments::zeros(model.b.dim());
        let hw = GroupHyper { lr, weight_decay };
        let hb = GroupHyper { lr, weight_decay: 0.0 };
        for _ in 0..epochs {
            let mut delta = softmax_rows(&model.logits(x));
            for (i, &c) in y.iter().enumerate() {
                delta[[i, c]] -= 1.0;
            }
            delta /= n as f64;
            let gw = x.t().dot(&delta);
            let gb = delta.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
            mw.update(&mut model.w, &gw, hw);
            mb.update(&mut model.b, &gb, hb);
        }
        let w = &model.w / &std.view().insert_axis(ndarray::Axis(1));
        let b = &model.b - &mean.view().insert_axis(ndarray::Axis(0)).dot(&w);
        Ok(Self { w, b })
    }

    pub fn logits(&self, x: &Mat) -> Mat {
        x.dot(&self.w) + &self.b
    }

    pub fn predict(&self, x: &Mat) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }

    /// Frame accuracy in percent.
    pub fn accuracy(&self, x: &Mat, y: &[usize]) -> f64 {
        percent_correct(&self.predict(x), y)
    }
}

fn percent_correct(pred: &[usize], gt: &[usize]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / gt.len() as f64
}

/// When to attach evaluation metrics to a report row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalCadence {
    EveryEpoch,
    PhaseEnd,
    Never,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Directory for `log.csv`, `timings.csv` and checkpoints; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Fill the `seconds` column of `log.csv`. Timings always go to `timings.csv`.
    pub wall_clock_in_log: bool,
    pub eval: EvalCadence,
    pub checkpoints: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            wall_clock_in_log: false,
            eval: EvalCadence::EveryEpoch,
            checkpoints: true,
        }
    }
}

/// Collects reports and mirrors them to disk as they arrive.
#[derive(Debug)]
pub struct RunLog {
    opts: RunOptions,
    reports: Vec<TrainingPhaseReport>,
}

impl RunLog {
    pub fn new(opts: RunOptions) -> Result<Self> {
        if let Some(dir) = &opts.out_dir {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("log.csv"), format!("{LOG_CSV_HEADER}\n"))?;
            fs::write(dir.join("timings.csv"), "phase,iter,epoch,seconds\n")?;
        }
        Ok(Self { opts, reports: Vec::new() })
    }

    /// In-memory log with per-epoch evaluation.
    pub fn in_memory() -> Self {
        Self {
            opts: RunOptions::default(),
            reports: Vec::new(),
        }
    }

    pub fn with_cadence(eval: EvalCadence) -> Self {
        Self {
            opts: RunOptions {
                eval,
                ..RunOptions::default()
            },
            reports: Vec::new(),
        }
    }

    pub fn reports(&self) -> &[TrainingPhaseReport] {
        &self.reports
    }

    pub fn into_reports(self) -> Vec<TrainingPhaseReport> {
        self.reports
    }

    pub fn options(&self) -> &RunOptions {
        &self.opts
    }

    pub fn record(&mut self, report: TrainingPhaseReport) -> Result<()> {
        if let Some(dir) = &self.opts.out_dir {
            append(&dir.join("log.csv"), &report.csv_row(self.opts.wall_clock_in_log))?;
            append(
                &dir.join("timings.csv"),
                &format!("{},{},{},{:.3}", report.phase.as_str(), report.iter, report.epoch, report.seconds),
            )?;
        }
        self.reports.push(report);
        Ok(())
    }

    fn wants_metrics(&self, epoch: usize, epochs: usize) -> bool {
        match self.opts.eval {
            EvalCadence::EveryEpoch => true,
            EvalCadence::PhaseEnd => epoch == epochs,
            EvalCadence::Never => false,
        }
    }

    fn checkpoint(&self, state: &ModelState, phase: Phase, iter: usize) -> Result<Option<PathBuf>> {
        match (&self.opts.out_dir, self.opts.checkpoints) {
            (Some(dir), true) => {
                let path = dir.join(checkpoint_name(phase, iter));
                state.save(&path, phase.as_str())?;
                Ok(Some(path))
            }
            _ => Ok(None),
        }
    }
}

pub fn checkpoint_name(phase: Phase, iter: usize) -> String {
    format!("ckpt_{}_{iter}.bin", phase.as_str())
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// Learning-rate group of `net` in `phase`, `None` when the network is frozen.
pub fn group_hyper(phase: Phase, cfg: &ExperimentConfig, net: Network) -> Option<GroupHyper> {
    let ts = GroupHyper {
        lr: cfg.lr_temporal_semantic,
        weight_decay: cfg.wd_temporal_semantic,
    };
    let tgs = GroupHyper {
        lr: cfg.lr_finetune,
        weight_decay: cfg.wd_finetune,
    };
    let c = GroupHyper {
        lr: cfg.lr_classifier,
        weight_decay: cfg.wd_classifier,
    };
    match (phase, net) {
        (Phase::Pretrain, Network::Temporal | Network::Semantic) => Some(ts),
        (Phase::Stage1 | Phase::Stage2, Network::Temporal | Network::Semantic | Network::Scorer) => Some(tgs),
        (Phase::Stage1, Network::Classifier) => Some(c),
        _ => None,
    }
}

/// `m_ij = 1` when both frames carry labels and the labels differ.
pub fn partial_label_mask(labels: &[Option<usize>]) -> PairMask {
    let n = labels.len();
    PairMask {
        m: Mat::from_shape_fn((n, n), |(i, j)| match (labels[i], labels[j]) {
            (Some(a), Some(b)) if a != b => 1.0,
            _ => 0.0,
        }),
    }
}

fn step_rng(cfg: &ExperimentConfig, phase: Phase, iter: usize, epoch: usize, batch: u64) -> Rng {
    seeded_rng(mix_seed(&[cfg.rng_seed, phase.code(), iter as u64, epoch as u64, batch]))
}

/// Per-frame labels used by `phase` for video `vi`.
fn frame_labels(
    data: &TrainingData,
    vi: usize,
    phase: Phase,
    pl: Option<&PseudoLabelStore>,
    threshold: Option<f64>,
) -> Result<Option<Vec<Option<usize>>>> {
    let video = &data.videos[vi];
    if phase == Phase::Pretrain {
        return Ok(None);
    }
    if let Some(gt) = &video.labels {
        return Ok(Some(gt.iter().copied().map(Some).collect()));
    }
    if phase == Phase::Stage1 {
        return Ok(None);
    }
    let entry = pl
        .and_then(|s| s.videos.get(&vi))
        .ok_or_else(|| Error::InvalidArgument(format!("no pseudo-labels for unlabelled video `{}`", video.video_id)))?;
    if entry.labels.len() != video.features.nrows() {
        return Err(Error::shape(
            "pseudo-labels",
            video.features.nrows(),
            entry.labels.len(),
        ));
    }
    Ok(Some(
        entry
            .labels
            .iter()
            .zip(&entry.confidence)
            .map(|(&l, &c)| match threshold {
                Some(t) if c < t => None,
                _ => Some(l),
            })
            .collect(),
    ))
}

fn gather_concat(g: &mut Graph, vars: &[Var], picks: &[Vec<usize>]) -> Var {
    let mut parts = Vec::with_capacity(vars.len());
    for (&v, idx) in vars.iter().zip(picks) {
        parts.push(g.gather_rows(v, idx.clone()));
    }
    g.concat_rows(parts)
}

/// One optimizer step on one batch of videos.
fn train_step(
    state: &mut ModelState,
    data: &TrainingData,
    phase: Phase,
    batch: &[usize],
    labels: &[Option<Vec<Option<usize>>>],
    rng: &mut Rng,
) -> Result<LossSnapshot> {
    let cfg = state.config.clone();
    let hyper = |n: Network| group_hyper(phase, &cfg, n);
    let mut g = Graph::new();
    let p = state.params.bind(&mut g, |n| hyper(n).is_some());
    let nets = &state.nets;

    let mut xs = Vec::with_capacity(batch.len());
    let mut hs = Vec::with_capacity(batch.len());
    for &vi in batch {
        let v = g.constant(data.videos[vi].features.clone());
        xs.push(nets.temporal_forward(&mut g, &p, v)?);
        hs.push(nets.semantic_forward(&mut g, &p, v)?);
    }
    let lengths: Vec<usize> = batch.iter().map(|&vi| data.videos[vi].features.nrows()).collect();
    let picks = sample_indices(&lengths, cfg.frames_per_video, rng)?;
    let mut x_s = gather_concat(&mut g, &xs, &picks);
    let mut h_s = gather_concat(&mut g, &hs, &picks);
    if cfg.normalize_embeddings {
        x_s = g.l2_normalize_rows(x_s);
        h_s = g.l2_normalize_rows(h_s);
    }

    let mask = if phase == Phase::Pretrain {
        let provenance: Vec<(usize, usize)> = picks
            .iter()
            .enumerate()
            .flat_map(|(bi, idx)| idx.iter().map(move |&t| (bi, t)))
            .collect();
        let f = cfg.feature_dim;
        let v_s = Mat::from_shape_fn((provenance.len(), f), |(r, c)| {
            let (bi, t) = provenance[r];
            data.videos[batch[bi]].features[[t, c]]
        });
        let sampled = SampledBatch {
            v_s,
            x_s: g.value(x_s).clone(),
            h_s: g.value(h_s).clone(),
            provenance,
            labels: None,
        };
        let k = cfg.clusters_for(state.num_classes).min(sampled.rows());
        match cfg.mask_mode {
            MaskMode::Dynamic => dynamic_mask(&sampled, k, rng)?,
            MaskMode::StaticInput => input_cluster_mask(&sampled, k, rng)?,
        }
    } else {
        let row_labels: Vec<Option<usize>> = picks
            .iter()
            .zip(labels)
            .flat_map(|(idx, l)| idx.iter().map(move |&t| l.as_ref().and_then(|l| l[t])))
            .collect();
        partial_label_mask(&row_labels)
    };

    let terms = smc_loss_graph(&mut g, h_s, x_s, &mask, cfg.scale_factor, &LossWeights::from_config(&cfg))?;
    let mut total = terms.total;

    let mut nca_value = 0.0;
    if phase != Phase::Pretrain && cfg.weight_nca > 0.0 {
        let mut sequences = Vec::new();
        for (&x, l) in xs.iter().zip(labels) {
            let Some(l) = l else { continue };
            let draws = sample_centers_partial(l, cfg.nca_window, cfg.nca_anchors, cfg.nca_partners, rng)?;
            if !draws.is_empty() {
                sequences.push((x, draws));
            }
        }
        if !sequences.is_empty() {
            let nca = nca_loss_graph(&mut g, nets, &p, &sequences, cfg.nca_window)?;
            nca_value = g.scalar(nca);
            let weighted = g.scale(nca, cfg.weight_nca);
            total = g.add(total, weighted);
        }
    }

    let mut ce_value = 0.0;
    if phase == Phase::Stage1 && cfg.weight_ce > 0.0 {
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for (&x, l) in xs.iter().zip(labels) {
            let Some(l) = l else { continue };
            let known: Vec<usize> = (0..l.len()).filter(|&t| l[t].is_some()).collect();
            if known.is_empty() {
                continue;
            }
            targets.extend(known.iter().map(|&t| l[t].expect("filtered")));
            let rows = g.gather_rows(x, known);
            logits.push(nets.classifier_forward(&mut g, &p, rows)?);
        }
        if !logits.is_empty() {
            let all = g.concat_rows(logits);
            let ce = g.softmax_cross_entropy(all, targets);
            ce_value = g.scalar(ce);
            let weighted = g.scale(ce, cfg.weight_ce);
            total = g.add(total, weighted);
        }
    }

    let smc = terms.values(&g);
    let snapshot = LossSnapshot {
        total: g.scalar(total),
        ap_pos: smc.ap_pos,
        ap_neg: smc.ap_neg,
        aa_neg: smc.aa_neg,
        pp_neg: smc.pp_neg,
        nca: nca_value,
        ce: ce_value,
    };
    if !snapshot.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = param_grads(&state.params, &p, &g.backward(total));
    state.adam.step(&mut state.params, &grads, hyper);
    state.counters.optimizer_steps += 1;
    Ok(snapshot)
}

/// Runs one epoch of `phase` and returns the batch-averaged losses.
///
/// Pretraining and stage 2 visit every video of D; stage 1 visits D_L only. The
/// epoch index keys the random streams, so replaying epoch `e` after a checkpoint
/// reload reproduces it exactly.
pub fn train_epoch(
    state: &mut ModelState,
    data: &TrainingData,
    phase: Phase,
    iter: usize,
    epoch: usize,
    pl: Option<&PseudoLabelStore>,
) -> Result<LossSnapshot> {
    let mut pool: Vec<usize> = match phase {
        Phase::Pretrain | Phase::Stage2 => (0..data.videos.len()).collect(),
        Phase::Stage1 => data.labelled(),
        Phase::Probe => return Err(Error::InvalidArgument("the probe has no training epochs".into())),
    };
    if pool.is_empty() {
        let what = if phase == Phase::Stage1 { "labelled videos" } else { "training videos" };
        return Err(Error::InvalidArgument(format!("{} needs at least one of the {what}", phase.as_str())));
    }
    let cfg = state.config.clone();
    pool.shuffle(&mut step_rng(&cfg, phase, iter, epoch, SHUFFLE_STREAM));
    let mut losses = Vec::new();
    for (b, batch) in pool.chunks(cfg.batch_videos).enumerate() {
        let labels = batch
            .iter()
            .map(|&vi| frame_labels(data, vi, phase, pl, cfg.pseudo_label_threshold))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = step_rng(&cfg, phase, iter, epoch, b as u64);
        losses.push(train_step(state, data, phase, batch, &labels, &mut rng)?);
    }
    match phase {
        Phase::Pretrain => state.counters.pretrain_epochs += 1,
        Phase::Stage1 => state.counters.stage1_epochs += 1,
        Phase::Stage2 => state.counters.stage2_epochs += 1,
        Phase::Probe => {}
    }
    Ok(LossSnapshot::mean(&losses))
}

/// Frozen temporal embeddings and labels of the labelled videos, one block per video.
fn labelled_embeddings(state: &ModelState, data: &TrainingData) -> Result<Vec<(Mat, Vec<usize>)>> {
    data.labelled()
        .into_iter()
        .map(|vi| {
            let v = &data.videos[vi];
            let x = embed_temporal(&state.nets, &state.params, &v.features)?;
            Ok((x, v.labels.clone().expect("labelled")))
        })
        .collect()
}

fn stack(blocks: &[&(Mat, Vec<usize>)]) -> (Mat, Vec<usize>) {
    let views: Vec<_> = blocks.iter().map(|(x, _)| x.view()).collect();
    let x = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    let y = blocks.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    (x, y)
}

fn fit_probe(state: &ModelState, blocks: &[&(Mat, Vec<usize>)]) -> Result<SoftmaxRegression> {
    let (x, y) = stack(blocks);
    let cfg = &state.config;
    SoftmaxRegression::fit(&x, &y, state.num_classes, cfg.probe_epochs, cfg.probe_lr, cfg.wd_classifier)
}

/// Probe accuracy on labelled frames the probe was not fitted on.
///
/// Labelled videos are split into up to five folds; with a single labelled video the
/// training accuracy is returned instead.
fn heldout_probe_accuracy(state: &ModelState, blocks: &[(Mat, Vec<usize>)]) -> Result<f64> {
    let n = blocks.len();
    if n == 0 {
        return Err(Error::InvalidArgument("probe needs at least one labelled video".into()));
    }
    if n == 1 {
        let probe = fit_probe(state, &[&blocks[0]])?;
        return Ok(probe.accuracy(&blocks[0].0, &blocks[0].1));
    }
    let folds = n.min(MAX_PROBE_FOLDS);
    let mut hits = 0usize;
    let mut frames = 0usize;
    for f in 0..folds {
        let train: Vec<&(Mat, Vec<usize>)> = blocks.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, b)| b).collect();
        let probe = fit_probe(state, &train)?;
        for (x, y) in blocks.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, b)| b) {
            hits += probe.predict(x).iter().zip(y).filter(|(a, b)| a == b).count();
            frames += y.len();
        }
    }
    Ok(100.0 * hits as f64 / frames as f64)
}

/// Prediction and scores for one evaluation video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoResult {
    pub video_id: String,
    /// Prediction at the original frame rate.
    pub prediction: Vec<usize>,
    /// `None` when the video has no ground truth.
    pub metrics: Option<MetricReport>,
}

/// Scores per-frame logits for every evaluation video at original resolution.
/// This is the only place hidden labels are read.
pub fn evaluate_videos(
    data: &TrainingData,
    mut logits: impl FnMut(&PreparedVideo) -> Result<Mat>,
) -> Result<(Vec<VideoResult>, Option<MetricReport>)> {
    let _scope = data.audit.eval_scope();
    let mut results = Vec::with_capacity(data.eval.len());
    for v in &data.eval {
        let pred_down = argmax_rows(&logits(v)?);
        let metrics = match &v.hidden {
            Some(h) => Some(evaluate(&pred_down, h.reveal())?),
            None => None,
        };
        results.push(VideoResult {
            video_id: v.video_id.clone(),
            prediction: upsample_predictions(&pred_down, v.t_original),
            metrics,
        });
    }
    let scored: Vec<MetricReport> = results.iter().filter_map(|r| r.metrics).collect();
    let mean = (!scored.is_empty()).then(|| MetricReport::mean(&scored));
    Ok((results, mean))
}

/// Evaluates the model's own classifier C on the evaluation videos.
pub fn evaluate_model(state: &ModelState, data: &TrainingData) -> Result<(Vec<VideoResult>, Option<MetricReport>)> {
    evaluate_videos(data, |v| {
        let x = embed_temporal(&state.nets, &state.params, &v.features)?;
        Ok(classifier_logits(&state.nets, &state.params, &x))
    })
}

/// Accuracy of C on the labelled videos, in percent.
pub fn labelled_accuracy(state: &ModelState, data: &TrainingData) -> Result<f64> {
    let blocks = labelled_embeddings(state, data)?;
    let mut hits = 0usize;
    let mut frames = 0usize;
    for (x, y) in &blocks {
        let pred = argmax_rows(&classifier_logits(&state.nets, &state.params, x));
        hits += pred.iter().zip(y).filter(|(a, b)| a == b).count();
        frames += y.len();
    }
    if frames == 0 {
        return Err(Error::InvalidArgument("no labelled frames".into()));
    }
    Ok(100.0 * hits as f64 / frames as f64)
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub classifier: SoftmaxRegression,
    /// Accuracy on the labelled frames the probe was trained on.
    pub train_accuracy: f64,
    /// Held-out accuracy over folds of the labelled videos; used for model selection.
    pub selection_accuracy: f64,
    pub metrics: Option<MetricReport>,
    pub per_video: Vec<VideoResult>,
}

/// Trains a fresh linear classifier on frozen temporal embeddings of D_L and scores it
/// on the evaluation videos.
pub fn linear_probe(state: &ModelState, data: &TrainingData) -> Result<ProbeResult> {
    let blocks = labelled_embeddings(state, data)?;
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("probe needs at least one labelled video".into()));
    }
    let all: Vec<&(Mat, Vec<usize>)> = blocks.iter().collect();
    let classifier = fit_probe(state, &all)?;
    let (x, y) = stack(&all);
    let train_accuracy = classifier.accuracy(&x, &y);
    let selection_accuracy = heldout_probe_accuracy(state, &blocks)?;
    let (per_video, metrics) = evaluate_videos(data, |v| {
        Ok(classifier.logits(&embed_temporal(&state.nets, &state.params, &v.features)?))
    })?;
    Ok(ProbeResult {
        classifier,
        train_accuracy,
        selection_accuracy,
        metrics,
        per_video,
    })
}

/// Records a standalone probe as a report row.
pub fn record_probe(state: &ModelState, data: &TrainingData, log: &mut RunLog) -> Result<ProbeResult> {
    let start = Instant::now();
    let probe = linear_probe(state, data)?;
    log.record(TrainingPhaseReport {
        phase: Phase::Probe,
        iter: 0,
        epoch: 0,
        losses: LossSnapshot::default(),
        metrics: probe.metrics,
        seconds: start.elapsed().as_secs_f64(),
    })?;
    Ok(probe)
}

/// E1 epochs of unsupervised contrast over all of D, keeping the state whose probe
/// scores best on held-out labelled videos. The initial state is a candidate and ties
/// go to the later epoch.
pub fn pretrain_unsupervised(state: ModelState, data: &TrainingData, log: &mut RunLog) -> Result<ModelState> {
    let _scope = data.audit.training_scope();
    let epochs = state.config.epochs_pretrain;
    if epochs == 0 {
        return Ok(state);
    }
    let mut best_score = heldout_probe_accuracy(&state, &labelled_embeddings(&state, data)?)?;
    let mut best = state.clone();
    let mut state = state;
    for e in 0..epochs {
        let start = Instant::now();
        let losses = train_epoch(&mut state, data, Phase::Pretrain, 0, e, None)?;
        let score = heldout_probe_accuracy(&state, &labelled_embeddings(&state, data)?)?;
        let metrics = if log.wants_metrics(e + 1, epochs) {
            linear_probe(&state, data)?.metrics
        } else {
            None
        };
        if score >= best_score {
            best_score = score;
            best = state.clone();
        }
        log.record(TrainingPhaseReport {
            phase: Phase::Pretrain,
            iter: 0,
            epoch: e + 1,
            losses,
            metrics,
            seconds: start.elapsed().as_secs_f64(),
        })?;
    }
    best.counters.pretrain_epochs = state.counters.pretrain_epochs;
    best.counters.optimizer_steps = state.counters.optimizer_steps;
    Ok(best)
}

fn run_stage(
    mut state: ModelState,
    data: &TrainingData,
    phase: Phase,
    iter: usize,
    epochs: usize,
    pl: Option<&PseudoLabelStore>,
    log: &mut RunLog,
) -> Result<ModelState> {
    let _scope = data.audit.training_scope();
    for e in 0..epochs {
        let start = Instant::now();
        let losses = train_epoch(&mut state, data, phase, iter, e, pl)?;
        let metrics = if log.wants_metrics(e + 1, epochs) {
            evaluate_model(&state, data)?.1
        } else {
            None
        };
        log.record(TrainingPhaseReport {
            phase,
            iter,
            epoch: e + 1,
            losses,
            metrics,
            seconds: start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(state)
}

/// E2 epochs over D_L with the supervised mask, NCA and cross-entropy; updates T, S, G and C.
pub fn stage1_supervised(state: ModelState, data: &TrainingData, iter: usize, log: &mut RunLog) -> Result<ModelState> {
    if data.labelled().is_empty() {
        return Err(Error::InvalidArgument("stage 1 needs at least one labelled video".into()));
    }
    let epochs = state.config.epochs_stage1;
    run_stage(state, data, Phase::Stage1, iter, epochs, None, log)
}

/// Predicts every unlabelled video of D with the current classifier.
pub fn refresh_pseudo_labels(state: &ModelState, data: &TrainingData) -> Result<PseudoLabelStore> {
    let mut store = PseudoLabelStore::default();
    for vi in data.unlabelled() {
        let x = embed_temporal(&state.nets, &state.params, &data.videos[vi].features)?;
        store
            .videos
            .insert(vi, PseudoLabels::from_logits(&classifier_logits(&state.nets, &state.params, &x)));
    }
    Ok(store)
}

/// E3 epochs over all of D with labels taken from GT where known and from `pl`
/// elsewhere; no cross-entropy, C frozen.
pub fn stage2_contrast(
    state: ModelState,
    data: &TrainingData,
    pl: &PseudoLabelStore,
    iter: usize,
    log: &mut RunLog,
) -> Result<ModelState> {
    for vi in data.unlabelled() {
        if !pl.videos.contains_key(&vi) {
            return Err(Error::InvalidArgument(format!(
                "no pseudo-labels for unlabelled video `{}`",
                data.videos[vi].video_id
            )));
        }
    }
    let epochs = state.config.epochs_stage2;
    run_stage(state, data, Phase::Stage2, iter, epochs, Some(pl), log)
}

#[derive(Debug)]
pub struct RunOutcome {
    /// The selected state.
    pub state: ModelState,
    /// Phase and iteration the selected state was taken after.
    pub selected: (Phase, usize),
    pub reports: Vec<TrainingPhaseReport>,
    pub per_video: Vec<VideoResult>,
    pub final_metrics: Option<MetricReport>,
    /// Hidden-label reads that happened before the final evaluation (all inside
    /// evaluation scopes, or the audit would have aborted).
    pub hidden_reads_during_training: usize,
}

/// The full schedule for `cfg.schedule`, followed by evaluation of the selected state.
///
/// Candidates are the states after every stage; the one whose classifier is most
/// accurate on D_L wins, ties going to the later state.
pub fn run_semi_supervised(split: &DatasetSplit, cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunOutcome> {
    let data = TrainingData::prepare(split, cfg)?;
    let mut log = RunLog::new(opts)?;
    let reads_before = data.audit.permitted_reads();
    let mut state = ModelState::init(cfg, data.num_classes());
    let mut best: Option<(f64, ModelState, (Phase, usize))> = None;
    let mut consider = |s: &ModelState, tag: (Phase, usize)| -> Result<()> {
        let score = labelled_accuracy(s, &data)?;
        if best.as_ref().is_none_or(|(b, _, _)| score >= *b) {
            best = Some((score, s.clone(), tag));
        }
        Ok(())
    };
    {
        let _scope = data.audit.training_scope();
        if cfg.schedule == Schedule::SemiSupervised {
            state = pretrain_unsupervised(state, &data, &mut log)?;
            log.checkpoint(&state, Phase::Pretrain, 0)?;
        }
        for i in 1..=cfg.iterations {
            state = stage1_supervised(state, &data, i, &mut log)?;
            log.checkpoint(&state, Phase::Stage1, i)?;
            consider(&state, (Phase::Stage1, i))?;
            if cfg.schedule == Schedule::SemiSupervised {
                let pl = refresh_pseudo_labels(&state, &data)?;
                state = stage2_contrast(state, &data, &pl, i, &mut log)?;
                log.checkpoint(&state, Phase::Stage2, i)?;
                consider(&state, (Phase::Stage2, i))?;
            }
            state.counters.iterations = i;
        }
    }
    let hidden_reads_during_training = data.audit.permitted_reads() - reads_before;
    let (state, selected) = match best {
        Some((_, s, tag)) => (s, tag),
        None => (state, (Phase::Pretrain, 0)),
    };
    let (per_video, final_metrics) = evaluate_model(&state, &data)?;
    Ok(RunOutcome {
        state,
        selected,
        reports: log.into_reports(),
        per_video,
        final_metrics,
        hidden_reads_during_training,
    })
}
