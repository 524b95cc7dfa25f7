//! Segmental evaluation: frame accuracy, edit score and F1 at IoU thresholds.
//!
//! All metrics are percentages in `[0, 100]`. Dataset-level numbers are plain
//! averages of per-video metrics.

use serde::{Deserialize, Serialize};

use crate::dataio::upsample_predictions;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal runs of a label sequence, tiling `[0, T)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentList {
    pub segments: Vec<Segment>,
}

impl SegmentList {
    pub fn labels(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.label).collect()
    }

    pub fn expand(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.label, s.len()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    fn without(&self, ignore: &[usize]) -> Vec<Segment> {
        self.segments
            .iter()
            .copied()
            .filter(|s| !ignore.contains(&s.label))
            .collect()
    }
}

pub fn segments_from_labels(labels: &[usize]) -> SegmentList {
    let mut segments: Vec<Segment> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match segments.last_mut() {
            Some(seg) if seg.label == l => seg.end = t + 1,
            _ => segments.push(Segment {
                label: l,
                start: t,
                end: t + 1,
            }),
        }
    }
    SegmentList { segments }
}

/// Classes excluded from every metric (e.g. a background class). Empty by default.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub ignore: Vec<usize>,
}

pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    frame_accuracy_with(pred, gt, &MetricOptions::default())
}

pub fn frame_accuracy_with(pred: &[usize], gt: &[usize], opts: &MetricOptions) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "frame_accuracy: prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        if opts.ignore.contains(g) {
            continue;
        }
        total += 1;
        correct += usize::from(p == g);
    }
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Unit-cost Levenshtein distance with a two-row table.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn edit_score(pred: &[usize], gt: &[usize]) -> f64 {
    edit_score_with(pred, gt, &MetricOptions::default())
}

pub fn edit_score_with(pred: &[usize], gt: &[usize], opts: &MetricOptions) -> f64 {
    let p: Vec<usize> = segments_from_labels(pred)
        .without(&opts.ignore)
        .iter()
        .map(|s| s.label)
        .collect();
    let g: Vec<usize> = segments_from_labels(gt)
        .without(&opts.ignore)
        .iter()
        .map(|s| s.label)
        .collect();
    let longest = p.len().max(g.len());
    if longest == 0 {
        return 100.0;
    }
    let d = levenshtein(&p, &g) as f64;
    (100.0 * (1.0 - d / longest as f64)).clamp(0.0, 100.0)
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// True positives, false positives and false negatives of the greedy segment matching.
pub fn overlap_counts(pred: &[usize], gt: &[usize], threshold: f64, opts: &MetricOptions) -> (usize, usize, usize) {
    let p = segments_from_labels(pred).without(&opts.ignore);
    let g = segments_from_labels(gt).without(&opts.ignore);
    segment_overlap_counts(&p, &g, threshold)
}

/// Greedy matching in predicted-segment order: each predicted segment consumes the
/// highest-IoU unmatched ground-truth segment of its label when that IoU reaches
/// `threshold`, and is a false positive otherwise.
pub fn segment_overlap_counts(p: &[Segment], g: &[Segment], threshold: f64) -> (usize, usize, usize) {
    let mut used = vec![false; g.len()];
    let (mut tp, mut fp) = (0, 0);
    for seg in p {
        let best = g
            .iter()
            .enumerate()
            .filter(|(j, gs)| !used[*j] && gs.label == seg.label)
            .map(|(j, gs)| (j, iou(seg, gs)))
            .filter(|&(_, o)| o >= threshold)
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some(b) if b.1 >= cand.1 => Some(b),
                _ => Some(cand),
            });
        match best {
            Some((j, _)) => {
                used[j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
    }
    let fn_ = used.iter().filter(|u| !**u).count();
    (tp, fp, fn_)
}

pub fn f1_at_overlap(pred: &[usize], gt: &[usize], threshold: f64) -> f64 {
    f1_at_overlap_with(pred, gt, threshold, &MetricOptions::default())
}

pub fn f1_at_overlap_with(pred: &[usize], gt: &[usize], threshold: f64, opts: &MetricOptions) -> f64 {
    f1_from_counts(overlap_counts(pred, gt, threshold, opts))
}

pub fn f1_from_segments(pred: &[Segment], gt: &[Segment], threshold: f64) -> f64 {
    f1_from_counts(segment_overlap_counts(pred, gt, threshold))
}

fn f1_from_counts((tp, fp, fn_): (usize, usize, usize)) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return 100.0;
    }
    100.0 * (2 * tp) as f64 / denom as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
}

impl MetricReport {
    pub fn compute(pred: &[usize], gt: &[usize], opts: &MetricOptions) -> Result<Self> {
        Ok(Self {
            acc: frame_accuracy_with(pred, gt, opts)?,
            edit: edit_score_with(pred, gt, opts),
            f1_10: f1_at_overlap_with(pred, gt, 0.10, opts),
            f1_25: f1_at_overlap_with(pred, gt, 0.25, opts),
            f1_50: f1_at_overlap_with(pred, gt, 0.50, opts),
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.acc, self.edit, self.f1_10, self.f1_25, self.f1_50]
    }

    /// Per-video average.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        let mut sum = [0.0; 5];
        for r in reports {
            for (s, v) in sum.iter_mut().zip(r.values()) {
                *s += v;
            }
        }
        MetricReport {
            acc: sum[0] / n,
            edit: sum[1] / n,
            f1_10: sum[2] / n,
            f1_25: sum[3] / n,
            f1_50: sum[4] / n,
        }
    }
}

/// Upsamples a downsampled prediction to the ground-truth length and scores it.
pub fn evaluate(pred_down: &[usize], gt_full: &[usize]) -> Result<MetricReport> {
    evaluate_with(pred_down, gt_full, &MetricOptions::default())
}

pub fn evaluate_with(pred_down: &[usize], gt_full: &[usize], opts: &MetricOptions) -> Result<MetricReport> {
    if pred_down.is_empty() || gt_full.is_empty() {
        return Err(Error::InvalidArgument("evaluate: empty sequence".into()));
    }
    let full = upsample_predictions(pred_down, gt_full.len());
    MetricReport::compute(&full, gt_full, opts)
}
