//! Synthetic labelled feature sequences.
//!
//! Labels follow a first-order Markov chain over classes with geometric segment
//! lengths. A frame's features are its class prototype plus isotropic noise plus a slow
//! sinusoidal drift along one shared direction, optionally shifted by a per-video offset.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::dataio::{write_mapping, write_video, FeatureSequence};
use crate::error::{Error, Result};
use crate::rng::{mix_seed, seeded_rng, substream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub num_test_videos: usize,
    pub frames_per_video: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub class_prototype_scale: f64,
    pub noise_sigma: f64,
    pub mean_segment_length: f64,
    /// Row-stochastic `A × A`; defaults to uniform over the other classes.
    pub transition_matrix: Option<Vec<Vec<f64>>>,
    pub drift_amplitude: f64,
    /// Drift period in frames.
    pub drift_period: f64,
    /// Standard deviation of a per-video constant offset added to every frame.
    pub video_shift_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 40,
            num_test_videos: 0,
            frames_per_video: 512,
            num_classes: 6,
            feature_dim: 32,
            class_prototype_scale: 1.0,
            noise_sigma: 0.5,
            mean_segment_length: 64.0,
            transition_matrix: None,
            drift_amplitude: 0.5,
            drift_period: 256.0,
            video_shift_sigma: 0.0,
            seed: 0,
        }
    }
}

fn invalid(field: &'static str, value: impl ToString, constraint: &'static str) -> Error {
    Error::InvalidField {
        field,
        value: value.to_string(),
        constraint,
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 {
            return Err(invalid("num_videos", self.num_videos, "must be >= 1"));
        }
        if self.frames_per_video == 0 {
            return Err(invalid("frames_per_video", self.frames_per_video, "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes", self.num_classes, "must be >= 2"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim", self.feature_dim, "must be >= 1"));
        }
        if !(self.mean_segment_length >= 1.0) {
            return Err(invalid("mean_segment_length", self.mean_segment_length, "must be >= 1"));
        }
        for (field, v) in [
            ("noise_sigma", self.noise_sigma),
            ("class_prototype_scale", self.class_prototype_scale),
            ("drift_amplitude", self.drift_amplitude),
            ("video_shift_sigma", self.video_shift_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(field, v, "must be finite and >= 0"));
            }
        }
        if !(self.drift_period > 0.0 && self.drift_period.is_finite()) {
            return Err(invalid("drift_period", self.drift_period, "must be > 0"));
        }
        if let Some(p) = &self.transition_matrix {
            let a = self.num_classes;
            let square = p.len() == a && p.iter().all(|r| r.len() == a);
            let stochastic = p.iter().all(|r| {
                r.iter().all(|&x| (0.0..=1.0).contains(&x)) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9
            });
            if !square || !stochastic {
                return Err(invalid(
                    "transition_matrix",
                    format!("{p:?}"),
                    "must be A x A with non-negative rows summing to 1",
                ));
            }
        }
        Ok(())
    }

    pub fn transitions(&self) -> Vec<Vec<f64>> {
        self.transition_matrix.clone().unwrap_or_else(|| {
            let a = self.num_classes;
            let off = 1.0 / (a - 1) as f64;
            (0..a)
                .map(|i| (0..a).map(|j| if i == j { 0.0 } else { off }).collect())
                .collect()
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|c| format!("action_{c}")).collect()
    }
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let a = p.len();
    let mut pi = vec![1.0 / a as f64; a];
    for _ in 0..10_000 {
        let mut next = vec![0.0; a];
        for (i, row) in p.iter().enumerate() {
            for (j, &pij) in row.iter().enumerate() {
                next[j] += pi[i] * pij;
            }
        }
        // Damped update so periodic chains still converge to their stationary vector.
        let next: Vec<f64> = next.iter().zip(&pi).map(|(n, o)| 0.5 * (n + o)).collect();
        let delta: f64 = next.iter().zip(&pi).map(|(x, y)| (x - y).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

fn draw_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Geometric segment length on `{1, 2, ...}` with the given mean.
fn draw_dwell(mean: f64, rng: &mut Rng) -> usize {
    let q = 1.0 / mean;
    if q >= 1.0 {
        return 1;
    }
    let u: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    1 + (u.ln() / (1.0 - q).ln()).floor() as usize
}

/// Frame labels for one video.
pub fn sample_labels(spec: &SynthSpec, frames: usize, rng: &mut Rng) -> Vec<usize> {
    let p = spec.transitions();
    let pi = stationary_distribution(&p);
    let mut labels = Vec::with_capacity(frames);
    let mut class = draw_categorical(&pi, rng);
    while labels.len() < frames {
        let dwell = draw_dwell(spec.mean_segment_length, rng).min(frames - labels.len());
        labels.extend(std::iter::repeat_n(class, dwell));
        class = draw_categorical(&p[class], rng);
    }
    labels
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Shared quantities of one synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    /// `A × F`, row `c` is `class_prototype_scale` times a unit vector.
    pub prototypes: Mat,
    pub drift_direction: Vec<f64>,
}

impl SynthWorld {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = substream(spec.seed, 1);
        let (a, f) = (spec.num_classes, spec.feature_dim);
        let mut prototypes = Mat::zeros((a, f));
        for c in 0..a {
            let u = random_unit(&mut rng, f);
            for j in 0..f {
                prototypes[[c, j]] = spec.class_prototype_scale * u[j];
            }
        }
        Self {
            prototypes,
            drift_direction: random_unit(&mut rng, f),
        }
    }
}

fn generate_video(spec: &SynthSpec, world: &SynthWorld, id: String, stream: u64) -> FeatureSequence {
    let mut rng = seeded_rng(mix_seed(&[spec.seed, stream]));
    let t_ori = spec.frames_per_video;
    let f = spec.feature_dim;
    let labels = sample_labels(spec, t_ori, &mut rng);
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let shift: Vec<f64> = (0..f)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.video_shift_sigma * z
        })
        .collect();
    let mut features = Mat::zeros((t_ori, f));
    for t in 0..t_ori {
        let drift = spec.drift_amplitude * (std::f64::consts::TAU * t as f64 / spec.drift_period + phase).sin();
        for j in 0..f {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[[t, j]] = world.prototypes[[labels[t], j]]
                + spec.noise_sigma * noise
                + drift * world.drift_direction[j]
                + shift[j];
        }
    }
    FeatureSequence {
        video_id: id,
        features,
        labels: Some(labels),
        source_path: None,
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
    pub class_names: Vec<String>,
    pub world: SynthWorld,
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let world = SynthWorld::new(spec);
    let train = (0..spec.num_videos)
        .map(|i| generate_video(spec, &world, format!("video_{i:03}"), i as u64))
        .collect();
    let test = (0..spec.num_test_videos)
        .map(|i| generate_video(spec, &world, format!("test_{i:03}"), (1 << 32) + i as u64))
        .collect();
    Ok(SynthDataset {
        train,
        test,
        class_names: spec.class_names(),
        world,
    })
}

/// Writes a dataset in the on-disk layout read by [`crate::dataio::load_dataset`].
pub fn write_dataset(spec: &SynthSpec, root: &Path) -> Result<SynthDataset> {
    let data = generate_dataset(spec)?;
    std::fs::create_dir_all(root)?;
    write_mapping(&root.join("mapping.txt"), &data.class_names)?;
    for v in data.train.iter().chain(&data.test) {
        write_video(root, v, &data.class_names)?;
    }
    if !data.test.is_empty() {
        let splits = root.join("splits");
        std::fs::create_dir_all(&splits)?;
        let ids: String = data.test.iter().map(|v| format!("{}\n", v.video_id)).collect();
        std::fs::write(splits.join("test.bundle"), ids)?;
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    use super::*;
    use crate::eval::segments_from_labels;

    #[test]
    fn zero_noise_frames_equal_prototypes() {
        let spec = SynthSpec {
            num_videos: 3,
            frames_per_video: 200,
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            ..Default::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for v in &data.train {
            let labels = v.labels.as_ref().unwrap();
            for (t, &c) in labels.iter().enumerate() {
                assert_eq!(v.features.row(t), data.world.prototypes.row(c));
                let nearest = (0..spec.num_classes)
                    .min_by(|&a, &b| {
                        let da = (&v.features.row(t) - &data.world.prototypes.row(a)).mapv(|x| x * x).sum();
                        let db = (&v.features.row(t) - &data.world.prototypes.row(b)).mapv(|x| x * x).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                correct += usize::from(nearest == c);
                total += 1;
            }
        }
        assert_eq!(correct, total);
        for c in 0..spec.num_classes {
            let norm = data.world.prototypes.row(c).mapv(|x| x * x).sum().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_segment_length_matches() {
        let l = 20.0;
        let spec = SynthSpec {
            num_videos: 20,
            frames_per_video: 5000,
            mean_segment_length: l,
            ..Default::default()
        };
        let mut lengths = Vec::new();
        for v in generate_dataset(&spec).unwrap().train {
            let segs = segments_from_labels(v.labels.as_ref().unwrap()).segments;
            // The last segment of each video is cut short by the video end.
            lengths.extend(segs[..segs.len() - 1].iter().map(|s| (s.end - s.start) as f64));
        }
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        assert!((mean - l).abs() / l < 0.05, "mean segment length {mean}");
    }

    #[test]
    fn class_prior_matches_stationary() {
        let spec = SynthSpec {
            num_videos: 100,
            frames_per_video: 1000,
            mean_segment_length: 10.0,
            ..Default::default()
        };
        let a = spec.num_classes;
        let pi = stationary_distribution(&spec.transitions());
        // Segment-level counts: frames inside one segment are not independent draws.
        let mut counts = vec![0.0; a];
        for v in generate_dataset(&spec).unwrap().train {
            for s in segments_from_labels(v.labels.as_ref().unwrap()).segments {
                counts[s.label] += 1.0;
            }
        }
        let n: f64 = counts.iter().sum();
        let chi2: f64 = counts.iter().zip(&pi).map(|(o, p)| (o - n * p).powi(2) / (n * p)).sum();
        let p_value = 1.0 - ChiSquared::new((a - 1) as f64).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "chi2 {chi2}, p {p_value}");
    }

    #[test]
    fn custom_transition_prior() {
        let p = vec![vec![0.0, 0.9, 0.1], vec![0.5, 0.0, 0.5], vec![0.8, 0.2, 0.0]];
        let spec = SynthSpec {
            num_videos: 50,
            frames_per_video: 2000,
            num_classes: 3,
            mean_segment_length: 5.0,
            transition_matrix: Some(p.clone()),
            ..Default::default()
        };
        let pi = stationary_distribution(&p);
        let mut counts = [0.0; 3];
        for v in generate_dataset(&spec).unwrap().train {
            for &l in v.labels.as_ref().unwrap() {
                counts[l] += 1.0;
            }
        }
        let n: f64 = counts.iter().sum();
        for c in 0..3 {
            assert!((counts[c] / n - pi[c]).abs() < 0.02, "{counts:?} vs {pi:?}");
        }
    }

    #[test]
    fn deterministic_files() {
        let spec = SynthSpec {
            num_videos: 2,
            num_test_videos: 1,
            frames_per_video: 64,
            seed: 7,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&spec, a.path()).unwrap();
        write_dataset(&spec, b.path()).unwrap();
        for rel in [
            "features/video_000.bin",
            "features/video_001.json",
            "features/test_000.bin",
            "groundTruth/video_001.txt",
            "mapping.txt",
            "splits/test.bundle",
        ] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        let split = crate::dataio::load_dataset(a.path(), 0.5, 0).unwrap();
        assert_eq!(split.labelled.len() + split.unlabelled.len(), 2);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn validation() {
        let bad = SynthSpec {
            transition_matrix: Some(vec![vec![0.5, 0.4], vec![0.5, 0.5]]),
            num_classes: 2,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(SynthSpec { mean_segment_length: 0.5, ..Default::default() }.validate().is_err());
        assert!(SynthSpec { noise_sigma: -1.0, ..Default::default() }.validate().is_err());
        assert!(SynthSpec::default().validate().is_ok());
    }
}
