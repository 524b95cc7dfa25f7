//! Dataset layout, temporal down/up-sampling and the labelled/unlabelled split.
//!
//! Directory layout:
//!
//! ```text
//! <root>/features/<video_id>.bin    little-endian f32, row-major, frames x dim
//! <root>/features/<video_id>.json   {"frames": T_ori, "dim": F}
//! <root>/groundTruth/<video_id>.txt one action name per line
//! <root>/mapping.txt                "<id> <action-name>" lines, ids 0..A-1
//! <root>/splits/test.bundle         optional; one test video id per line
//! ```

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `T_ori × F`.
    pub features: Mat,
    pub labels: Option<Vec<usize>>,
    pub source_path: Option<PathBuf>,
}

impl FeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Mat, labels: Option<Vec<usize>>) -> Result<Self> {
        let seq = Self {
            video_id: video_id.into(),
            features,
            labels,
            source_path: None,
        };
        seq.validate(None)?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn validate(&self, num_classes: Option<usize>) -> Result<()> {
        let (t, f) = self.features.dim();
        if t == 0 || f == 0 {
            return Err(Error::Malformed {
                what: "feature sequence",
                detail: format!("`{}` has shape {t} x {f}", self.video_id),
            });
        }
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature sequence"));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != t {
                return Err(Error::LengthMismatch {
                    video_id: self.video_id.clone(),
                    features: t,
                    labels: labels.len(),
                });
            }
            if let Some(a) = num_classes {
                if let Some(bad) = labels.iter().find(|&&l| l >= a) {
                    return Err(Error::Malformed {
                        what: "labels",
                        detail: format!("class id {bad} out of range 0..{a} in `{}`", self.video_id),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A sequence pooled to the working temporal resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampledSequence {
    pub features: Mat,
    pub labels: Option<Vec<usize>>,
    pub t_original: usize,
    /// Set when the target length exceeded the original and frames were repeated.
    pub repeated: bool,
}

impl DownsampledSequence {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// First original frame of chunk `c` when `n` frames are split into `t` chunks.
/// Using the ceiling makes chunk membership agree exactly with `upsample_predictions`.
fn chunk_start(c: usize, n: usize, t: usize) -> usize {
    (c * n).div_ceil(t)
}

/// Chunk-wise mean pooling of features and majority vote of labels down to `target_t` frames.
pub fn downsample(seq: &FeatureSequence, target_t: usize) -> DownsampledSequence {
    assert!(target_t >= 1, "downsample: target length must be >= 1");
    let n = seq.len();
    let f = seq.dim();
    let mut features = Mat::zeros((target_t, f));
    let mut labels = seq.labels.as_ref().map(|_| Vec::with_capacity(target_t));
    let repeated = target_t > n;
    for c in 0..target_t {
        let (start, end) = if repeated {
            let i = c * n / target_t;
            (i, i + 1)
        } else {
            (chunk_start(c, n, target_t), chunk_start(c + 1, n, target_t))
        };
        let chunk = seq.features.slice(ndarray::s![start..end, ..]);
        features
            .row_mut(c)
            .assign(&chunk.mean_axis(ndarray::Axis(0)).expect("non-empty chunk"));
        if let (Some(out), Some(src)) = (labels.as_mut(), seq.labels.as_ref()) {
            out.push(majority(&src[start..end]));
        }
    }
    DownsampledSequence {
        features,
        labels,
        t_original: n,
        repeated,
    }
}

/// Most frequent label; ties go to the label that occurs first.
fn majority(labels: &[usize]) -> usize {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match counts.iter_mut().find(|(k, _)| *k == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    counts
        .iter()
        .fold(None::<(usize, usize)>, |best, &(l, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((l, c)),
        })
        .map(|(l, _)| l)
        .expect("non-empty chunk")
}

/// Nearest-neighbour expansion: output frame `i` takes `pred[floor(i * T / t_original)]`.
pub fn upsample_predictions(pred: &[usize], t_original: usize) -> Vec<usize> {
    assert!(!pred.is_empty(), "upsample_predictions: empty prediction");
    let t = pred.len();
    (0..t_original).map(|i| pred[i * t / t_original]).collect()
}

/// Counts reads of hidden labels and rejects any that happen while training is active.
#[derive(Debug, Default)]
pub struct LabelAudit {
    training_depth: AtomicUsize,
    eval_depth: AtomicUsize,
    violations: AtomicUsize,
    permitted_reads: AtomicUsize,
}

impl LabelAudit {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn training_scope(self: &Arc<Self>) -> AuditScope {
        self.training_depth.fetch_add(1, Ordering::SeqCst);
        AuditScope {
            audit: Arc::clone(self),
            training: true,
        }
    }

    pub fn eval_scope(self: &Arc<Self>) -> AuditScope {
        self.eval_depth.fetch_add(1, Ordering::SeqCst);
        AuditScope {
            audit: Arc::clone(self),
            training: false,
        }
    }

    pub fn violations(&self) -> usize {
        self.violations.load(Ordering::SeqCst)
    }

    pub fn permitted_reads(&self) -> usize {
        self.permitted_reads.load(Ordering::SeqCst)
    }

    fn on_read(&self) {
        let training = self.training_depth.load(Ordering::SeqCst) > 0;
        let eval = self.eval_depth.load(Ordering::SeqCst) > 0;
        if training && !eval {
            self.violations.fetch_add(1, Ordering::SeqCst);
            panic!("hidden labels of an unlabelled video were read during training");
        }
        self.permitted_reads.fetch_add(1, Ordering::SeqCst);
    }
}

#[must_use]
pub struct AuditScope {
    audit: Arc<LabelAudit>,
    training: bool,
}

impl Drop for AuditScope {
    fn drop(&mut self) {
        let counter = if self.training {
            &self.audit.training_depth
        } else {
            &self.audit.eval_depth
        };
        counter.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Ground truth that training code must not see.
#[derive(Debug, Clone)]
pub struct HiddenLabels {
    labels: Vec<usize>,
    audit: Arc<LabelAudit>,
}

impl HiddenLabels {
    pub fn new(labels: Vec<usize>, audit: Arc<LabelAudit>) -> Self {
        Self { labels, audit }
    }

    /// Panics when called inside a training scope that is not also an evaluation scope.
    pub fn reveal(&self) -> &[usize] {
        self.audit.on_read();
        &self.labels
    }
}

/// A video whose labels, if any, are hidden from training.
#[derive(Debug, Clone)]
pub struct HeldOutVideo {
    /// Always carries `labels: None`.
    pub sequence: FeatureSequence,
    pub hidden: Option<HiddenLabels>,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labelled: Vec<FeatureSequence>,
    pub unlabelled: Vec<HeldOutVideo>,
    pub test: Vec<HeldOutVideo>,
    /// Index = class id.
    pub class_names: Vec<String>,
    pub audit: Arc<LabelAudit>,
}

impl DatasetSplit {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Videos used for reported metrics: the test split, or the unlabelled videos when
    /// no test split exists.
    pub fn eval_videos(&self) -> &[HeldOutVideo] {
        if self.test.is_empty() {
            &self.unlabelled
        } else {
            &self.test
        }
    }

    /// Partitions labelled training sequences into D_L and D_U by seeded whole-video sampling.
    /// `ceil(n * fraction)` videos (at least one) keep their labels.
    pub fn partition(
        mut train: Vec<FeatureSequence>,
        mut test: Vec<FeatureSequence>,
        class_names: Vec<String>,
        labelled_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
            return Err(Error::InvalidField {
                field: "labelled_fraction",
                value: labelled_fraction.to_string(),
                constraint: "must lie in (0, 1]",
            });
        }
        if train.is_empty() {
            return Err(Error::InvalidArgument("dataset has no training videos".into()));
        }
        let a = class_names.len();
        for s in train.iter().chain(test.iter()) {
            s.validate(Some(a))?;
            if s.labels.is_none() {
                return Err(Error::Malformed {
                    what: "dataset",
                    detail: format!("video `{}` has no labels", s.video_id),
                });
            }
        }
        train.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        test.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let ids: Vec<&str> = train.iter().chain(&test).map(|s| s.video_id.as_str()).collect();
        let mut dedup = ids.clone();
        dedup.sort();
        dedup.dedup();
        if dedup.len() != ids.len() {
            return Err(Error::Malformed {
                what: "dataset",
                detail: "duplicate video ids".into(),
            });
        }

        let n = train.len();
        let n_labelled = (((n as f64) * labelled_fraction - 1e-9).ceil() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(seed, 0x5EED_5A17));
        let mut is_labelled = vec![false; n];
        for &i in &order[..n_labelled] {
            is_labelled[i] = true;
        }

        let audit = LabelAudit::new();
        let hide = |mut s: FeatureSequence| {
            let labels = s.labels.take().expect("validated");
            HeldOutVideo {
                sequence: s,
                hidden: Some(HiddenLabels::new(labels, Arc::clone(&audit))),
            }
        };
        let mut labelled = Vec::with_capacity(n_labelled);
        let mut unlabelled = Vec::with_capacity(n - n_labelled);
        for (seq, keep) in train.into_iter().zip(is_labelled) {
            if keep {
                labelled.push(seq);
            } else {
                unlabelled.push(hide(seq));
            }
        }
        let test = test.into_iter().map(hide).collect();
        Ok(Self {
            labelled,
            unlabelled,
            test,
            class_names,
            audit,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    frames: usize,
    dim: usize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Reads `mapping.txt` into names indexed by class id.
pub fn read_mapping(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut pairs: Vec<(usize, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, name) = line.split_once(char::is_whitespace).ok_or_else(|| Error::Malformed {
            what: "mapping.txt",
            detail: format!("line {}: expected `<id> <name>`", lineno + 1),
        })?;
        let id: usize = id.parse().map_err(|_| Error::Malformed {
            what: "mapping.txt",
            detail: format!("line {}: bad id `{id}`", lineno + 1),
        })?;
        pairs.push((id, name.trim().to_string()));
    }
    pairs.sort_by_key(|(id, _)| *id);
    for (expect, (id, _)) in pairs.iter().enumerate() {
        if *id != expect {
            return Err(Error::Malformed {
                what: "mapping.txt",
                detail: format!("ids must be contiguous from 0; missing {expect}"),
            });
        }
    }
    let names: Vec<String> = pairs.into_iter().map(|(_, n)| n).collect();
    let mut sorted = names.clone();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != names.len() || names.is_empty() {
        return Err(Error::Malformed {
            what: "mapping.txt",
            detail: "class names must be unique and non-empty".into(),
        });
    }
    Ok(names)
}

pub fn write_mapping(path: &Path, class_names: &[String]) -> Result<()> {
    let mut out = String::new();
    for (i, n) in class_names.iter().enumerate() {
        out.push_str(&format!("{i} {n}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_features(bin_path: &Path) -> Result<Mat> {
    let sidecar_path = bin_path.with_extension("json");
    let sidecar: Sidecar = serde_json::from_str(&read_text(&sidecar_path)?).map_err(|e| Error::Malformed {
        what: "feature sidecar",
        detail: format!("{}: {e}", sidecar_path.display()),
    })?;
    let bytes = fs::read(bin_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(bin_path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let expected = sidecar.frames * sidecar.dim * 4;
    if bytes.len() != expected || sidecar.frames == 0 || sidecar.dim == 0 {
        return Err(Error::Malformed {
            what: "feature file",
            detail: format!(
                "{}: {} bytes, sidecar implies {expected}",
                bin_path.display(),
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if !values.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("feature file"));
    }
    Ok(Mat::from_shape_vec((sidecar.frames, sidecar.dim), values).expect("size checked"))
}

/// Writes `<stem>.bin` and its `<stem>.json` sidecar. Values are stored as f32.
pub fn write_features(bin_path: &Path, features: &Mat) -> Result<()> {
    let (frames, dim) = features.dim();
    let mut bytes = Vec::with_capacity(frames * dim * 4);
    for v in features.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(bin_path, bytes)?;
    fs::write(
        bin_path.with_extension("json"),
        serde_json::to_string(&Sidecar { frames, dim })?,
    )?;
    Ok(())
}

pub fn read_label_file(path: &Path, lookup: &HashMap<&str, usize>) -> Result<Vec<usize>> {
    read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|name| {
            lookup.get(name).copied().ok_or_else(|| Error::UnknownLabel {
                label: name.to_string(),
                path: path.to_path_buf(),
            })
        })
        .collect()
}

pub fn write_label_file(path: &Path, labels: &[usize], class_names: &[String]) -> Result<()> {
    let mut out = String::with_capacity(labels.len() * 8);
    for &l in labels {
        let name = class_names.get(l).ok_or_else(|| {
            Error::InvalidArgument(format!("class id {l} has no name in the mapping"))
        })?;
        out.push_str(name);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_test_bundle(root: &Path) -> Result<Option<Vec<String>>> {
    let path = root.join("splits").join("test.bundle");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(
        read_text(&path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.trim_end_matches(".txt").to_string())
            .collect(),
    ))
}

/// Reads every video under `root`, sorted by id.
pub fn read_videos(root: &Path) -> Result<(Vec<FeatureSequence>, Vec<String>)> {
    let class_names = read_mapping(&root.join("mapping.txt"))?;
    let lookup: HashMap<&str, usize> = class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let feat_dir = root.join("features");
    if !feat_dir.is_dir() {
        return Err(Error::MissingFile(feat_dir));
    }
    let mut bins: Vec<PathBuf> = fs::read_dir(&feat_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    bins.sort();
    let mut videos = Vec::with_capacity(bins.len());
    for bin in bins {
        let video_id = bin
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Malformed {
                what: "feature file name",
                detail: bin.display().to_string(),
            })?
            .to_string();
        let features = read_features(&bin)?;
        let gt_path = root.join("groundTruth").join(format!("{video_id}.txt"));
        let labels = read_label_file(&gt_path, &lookup)?;
        if labels.len() != features.nrows() {
            return Err(Error::LengthMismatch {
                video_id,
                features: features.nrows(),
                labels: labels.len(),
            });
        }
        videos.push(FeatureSequence {
            video_id,
            features,
            labels: Some(labels),
            source_path: Some(bin),
        });
    }
    videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok((videos, class_names))
}

pub fn load_dataset(root: &Path, labelled_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    let (videos, class_names) = read_videos(root)?;
    let test_ids = read_test_bundle(root)?.unwrap_or_default();
    let (test, train): (Vec<_>, Vec<_>) = videos
        .into_iter()
        .partition(|v| test_ids.iter().any(|t| t == &v.video_id));
    DatasetSplit::partition(train, test, class_names, labelled_fraction, seed)
}

/// Writes one video in the dataset layout (features, sidecar, ground truth).
pub fn write_video(root: &Path, seq: &FeatureSequence, class_names: &[String]) -> Result<()> {
    let feat_dir = root.join("features");
    let gt_dir = root.join("groundTruth");
    fs::create_dir_all(&feat_dir)?;
    fs::create_dir_all(&gt_dir)?;
    write_features(&feat_dir.join(format!("{}.bin", seq.video_id)), &seq.features)?;
    if let Some(labels) = &seq.labels {
        write_label_file(&gt_dir.join(format!("{}.txt", seq.video_id)), labels, class_names)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    const A: usize = 0;
    const B: usize = 1;

    fn seq(features: Mat, labels: Option<Vec<usize>>) -> FeatureSequence {
        FeatureSequence::new("v", features, labels).unwrap()
    }

    #[test]
    fn downsample_mean_of_halves() {
        let s = seq(array![[0.0], [2.0], [4.0], [6.0]], Some(vec![A, A, B, B]));
        let d = downsample(&s, 2);
        assert_eq!(d.features, array![[1.0], [5.0]]);
        assert_eq!(d.labels, Some(vec![A, B]));
        assert_eq!(d.t_original, 4);
        assert!(!d.repeated);
    }

    #[test]
    fn downsample_tie_goes_to_earlier_frame() {
        let s = seq(Mat::zeros((4, 1)), Some(vec![A, B, B, A]));
        assert_eq!(downsample(&s, 2).labels, Some(vec![A, B]));
        let s = seq(Mat::zeros((4, 1)), Some(vec![B, A, A, B]));
        assert_eq!(downsample(&s, 2).labels, Some(vec![B, A]));
    }

    #[test]
    fn downsample_longer_target_repeats() {
        let s = seq(array![[1.0], [3.0]], Some(vec![A, B]));
        let d = downsample(&s, 4);
        assert!(d.repeated);
        assert_eq!(d.features, array![[1.0], [1.0], [3.0], [3.0]]);
        assert_eq!(d.labels, Some(vec![A, A, B, B]));
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(upsample_predictions(&[A, B], 4), vec![A, A, B, B]);
        assert_eq!(upsample_predictions(&[A], 3), vec![A, A, A]);
    }

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(FeatureSequence::new("x", array![[f64::NAN]], None).is_err());
        assert!(matches!(
            FeatureSequence::new("x", array![[1.0], [2.0]], Some(vec![0])),
            Err(Error::LengthMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn upsample_length(pred in prop::collection::vec(0usize..5, 1..50), n in 1usize..300) {
            prop_assert_eq!(upsample_predictions(&pred, n).len(), n);
        }

        #[test]
        fn aligned_round_trip(coarse in prop::collection::vec(0usize..4, 1..40), extra in 0usize..200) {
            let t = coarse.len();
            let n = t + extra;
            let full = upsample_predictions(&coarse, n);
            let s = FeatureSequence::new("v", Mat::zeros((n, 1)), Some(full.clone())).unwrap();
            let d = downsample(&s, t);
            prop_assert_eq!(d.labels.as_ref().unwrap(), &coarse);
            prop_assert_eq!(upsample_predictions(d.labels.as_ref().unwrap(), n), full);
        }

        #[test]
        fn mean_preserved(t in 1usize..20, k in 1usize..8, seed in any::<u64>()) {
            use rand::Rng as _;
            let mut rng = crate::rng::seeded_rng(seed);
            // equal chunks: exact
            let n = t * k;
            let x = Mat::from_shape_fn((n, 3), |_| rng.random_range(-5.0..5.0));
            let s = FeatureSequence::new("v", x.clone(), None).unwrap();
            let d = downsample(&s, t);
            let m_in = x.mean_axis(ndarray::Axis(0)).unwrap();
            let m_out = d.features.mean_axis(ndarray::Axis(0)).unwrap();
            for (a, b) in m_in.iter().zip(m_out.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            // unequal chunks: chunk-size-weighted mean is the input mean
            let n2 = n + 1 + (seed as usize % (t.max(2) - 1));
            let x2 = Mat::from_shape_fn((n2, 3), |_| rng.random_range(-5.0..5.0));
            let s2 = FeatureSequence::new("v", x2.clone(), None).unwrap();
            let d2 = downsample(&s2, t);
            let m_in = x2.mean_axis(ndarray::Axis(0)).unwrap();
            for j in 0..3 {
                let weighted: f64 = (0..t)
                    .map(|c| d2.features[[c, j]] * (chunk_start(c + 1, n2, t) - chunk_start(c, n2, t)) as f64)
                    .sum::<f64>() / n2 as f64;
                prop_assert!((weighted - m_in[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn audit_blocks_training_reads() {
        let audit = LabelAudit::new();
        let hidden = HiddenLabels::new(vec![1, 2], Arc::clone(&audit));
        assert_eq!(hidden.reveal(), &[1, 2]);
        {
            let _t = audit.training_scope();
            let _e = audit.eval_scope();
            assert_eq!(hidden.reveal(), &[1, 2]);
        }
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _t = audit.training_scope();
            hidden.reveal().len()
        }));
        assert!(result.is_err());
        assert_eq!(audit.violations(), 1);
        assert_eq!(audit.permitted_reads(), 2);
    }

    fn tiny_dataset(root: &Path, n: usize) -> Vec<String> {
        let names = vec!["cut".to_string(), "mix".to_string()];
        write_mapping(&root.join("mapping.txt"), &names).unwrap();
        for i in 0..n {
            let labels = vec![0, 0, 1, 1, 1];
            let features = Mat::from_shape_fn((5, 2), |(t, j)| (i * 10 + t + j) as f64);
            let s = FeatureSequence::new(format!("vid{i:02}"), features, Some(labels)).unwrap();
            write_video(root, &s, &names).unwrap();
        }
        names
    }

    #[test]
    fn load_twenty_videos_five_percent() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 20);
        let split = load_dataset(dir.path(), 0.05, 3).unwrap();
        assert_eq!(split.labelled.len(), 1);
        assert_eq!(split.unlabelled.len(), 19);
        assert_eq!(split.num_classes(), 2);
        let again = load_dataset(dir.path(), 0.05, 3).unwrap();
        assert_eq!(split.labelled[0].video_id, again.labelled[0].video_id);
        // disjoint ids, sorted
        let ids: Vec<&str> = split.unlabelled.iter().map(|v| v.sequence.video_id.as_str()).collect();
        assert!(!ids.contains(&split.labelled[0].video_id.as_str()));
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert!(split.unlabelled.iter().all(|v| v.sequence.labels.is_none()));
        // features survive the f32 round trip
        assert_eq!(split.labelled[0].features[[4, 1]], split.labelled[0].features[[4, 1]].round());
    }

    #[test]
    fn test_bundle_is_held_out() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 6);
        fs::create_dir_all(dir.path().join("splits")).unwrap();
        fs::write(dir.path().join("splits/test.bundle"), "vid04.txt\nvid05\n").unwrap();
        let split = load_dataset(dir.path(), 1.0, 0).unwrap();
        assert_eq!(split.labelled.len(), 4);
        assert!(split.unlabelled.is_empty());
        assert_eq!(split.test.len(), 2);
        assert_eq!(split.eval_videos().len(), 2);
    }

    #[test]
    fn unknown_label_is_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 2);
        fs::write(dir.path().join("groundTruth/vid01.txt"), "cut\ncut\nstir\nmix\nmix\n").unwrap();
        let err = load_dataset(dir.path(), 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::UnknownLabel { ref label, .. } if label == "stir"), "{err}");
    }

    #[test]
    fn length_mismatch_is_error() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 2);
        fs::write(dir.path().join("groundTruth/vid00.txt"), "cut\nmix\n").unwrap();
        assert!(matches!(
            load_dataset(dir.path(), 0.5, 0).unwrap_err(),
            Error::LengthMismatch { .. }
        ));
    }

    #[test]
    fn missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path(), 0.5, 0).unwrap_err(),
            Error::MissingFile(_)
        ));
        tiny_dataset(dir.path(), 2);
        fs::remove_file(dir.path().join("groundTruth/vid01.txt")).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), 0.5, 0).unwrap_err(),
            Error::MissingFile(_)
        ));
    }
}
