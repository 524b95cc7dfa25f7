//! Experiment configuration.
//!
//! The on-disk form is a flat JSON object whose keys are exactly the field names of
//! [`ExperimentConfig`]. Missing keys take the defaults below; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How negative pairs are selected during unsupervised contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Re-cluster input, temporal and semantic features every batch and intersect.
    Dynamic,
    /// Cluster the sampled input features only (fixed across training).
    StaticInput,
}

/// Which training schedule `run_semi_supervised` executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Pretrain, then `iterations` rounds of stage 1 / pseudo-label refresh / stage 2.
    SemiSupervised,
    /// Stage 1 repeated `iterations` times from a fresh initialization; no pretraining, no stage 2.
    SupervisedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub feature_dim: usize,
    pub embedding_dim: usize,
    /// Temporal length every video is pooled to before entering the networks.
    pub downsample_length: usize,
    /// Frames sampled per video for the contrastive losses.
    pub frames_per_video: usize,
    pub batch_videos: usize,
    /// Divides every inner product inside the contrastive losses.
    pub scale_factor: f64,
    /// InfoNCE temperature (baseline loss only).
    pub temperature: f64,
    /// k for the k-means views; `None` means "number of classes".
    pub num_clusters: Option<usize>,
    pub nca_window: usize,
    pub nca_anchors: usize,
    pub nca_partners: usize,
    pub iterations: usize,
    pub epochs_pretrain: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// (T:S) group during unsupervised pretraining.
    pub lr_temporal_semantic: f64,
    pub wd_temporal_semantic: f64,
    /// Linear classifier C.
    pub lr_classifier: f64,
    pub wd_classifier: f64,
    /// (T:G:S) group during the semi-supervised stages.
    pub lr_finetune: f64,
    pub wd_finetune: f64,
    pub weight_ap_pos: f64,
    pub weight_ap_neg: f64,
    pub weight_aa_neg: f64,
    pub weight_pp_neg: f64,
    pub weight_nca: f64,
    pub weight_ce: f64,
    pub labelled_fraction: f64,
    pub rng_seed: u64,
    pub encoder_depth: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub semantic_hidden: usize,
    /// Number of hidden ReLU layers in the semantic extractor.
    pub semantic_layers: usize,
    pub scorer_hidden: usize,
    /// L2-normalize embeddings before the triplet-style losses.
    pub normalize_embeddings: bool,
    pub mask_mode: MaskMode,
    pub schedule: Schedule,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    /// Pseudo-labels below this max-softmax confidence are dropped from stage-2 masks.
    pub pseudo_label_threshold: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            embedding_dim: 64,
            downsample_length: 128,
            frames_per_video: 32,
            batch_videos: 5,
            scale_factor: 1.0,
            temperature: 0.1,
            num_clusters: None,
            nca_window: 8,
            nca_anchors: 1,
            nca_partners: 10,
            iterations: 4,
            epochs_pretrain: 100,
            epochs_stage1: 100,
            epochs_stage2: 100,
            lr_temporal_semantic: 1e-3,
            wd_temporal_semantic: 1e-3,
            lr_classifier: 1e-2,
            wd_classifier: 1e-3,
            lr_finetune: 1e-5,
            wd_finetune: 1e-3,
            weight_ap_pos: 1.0,
            weight_ap_neg: 1.0,
            weight_aa_neg: 1.0,
            weight_pp_neg: 1.0,
            weight_nca: 1.0,
            weight_ce: 1.0,
            labelled_fraction: 0.05,
            rng_seed: 0,
            encoder_depth: 3,
            hidden_channels: 64,
            kernel_size: 3,
            semantic_hidden: 64,
            semantic_layers: 1,
            scorer_hidden: 64,
            normalize_embeddings: false,
            mask_mode: MaskMode::Dynamic,
            schedule: Schedule::SemiSupervised,
            probe_epochs: 200,
            probe_lr: 1e-2,
            pseudo_label_threshold: None,
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

fn check(ok: bool, field: &'static str, value: impl ToString, constraint: &'static str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(invalid(field, value, constraint))
    }
}

fn positive_finite(field: &'static str, v: f64) -> Result<()> {
    check(v.is_finite() && v > 0.0, field, v, "must be finite and > 0")
}

fn non_negative_finite(field: &'static str, v: f64) -> Result<()> {
    check(v.is_finite() && v >= 0.0, field, v, "must be finite and >= 0")
}

/// Checks every invariant of `cfg` and returns it unchanged on success.
pub fn validate_config(cfg: ExperimentConfig) -> Result<ExperimentConfig> {
    check(cfg.feature_dim >= 1, "feature_dim", cfg.feature_dim, "must be >= 1")?;
    check(cfg.embedding_dim >= 1, "embedding_dim", cfg.embedding_dim, "must be >= 1")?;
    check(
        cfg.downsample_length >= 1,
        "downsample_length",
        cfg.downsample_length,
        "must be >= 1",
    )?;
    check(
        cfg.frames_per_video >= 1 && cfg.frames_per_video <= cfg.downsample_length,
        "frames_per_video",
        cfg.frames_per_video,
        "must satisfy 1 <= frames_per_video <= downsample_length",
    )?;
    check(cfg.batch_videos >= 1, "batch_videos", cfg.batch_videos, "must be >= 1")?;
    check(
        cfg.scale_factor.is_finite() && cfg.scale_factor > 0.0 && cfg.scale_factor <= 1.0,
        "scale_factor",
        cfg.scale_factor,
        "must lie in (0, 1]",
    )?;
    positive_finite("temperature", cfg.temperature)?;
    if let Some(k) = cfg.num_clusters {
        check(k >= 2, "num_clusters", k, "must be >= 2")?;
    }
    check(
        cfg.nca_window % 2 == 0 && cfg.nca_window >= 2,
        "nca_window",
        cfg.nca_window,
        "must be even and >= 2",
    )?;
    check(
        cfg.nca_window < cfg.downsample_length,
        "nca_window",
        cfg.nca_window,
        "must be < downsample_length",
    )?;
    check(cfg.nca_anchors >= 1, "nca_anchors", cfg.nca_anchors, "must be >= 1")?;
    check(cfg.nca_partners >= 1, "nca_partners", cfg.nca_partners, "must be >= 1")?;
    positive_finite("lr_temporal_semantic", cfg.lr_temporal_semantic)?;
    non_negative_finite("wd_temporal_semantic", cfg.wd_temporal_semantic)?;
    positive_finite("lr_classifier", cfg.lr_classifier)?;
    non_negative_finite("wd_classifier", cfg.wd_classifier)?;
    positive_finite("lr_finetune", cfg.lr_finetune)?;
    non_negative_finite("wd_finetune", cfg.wd_finetune)?;
    non_negative_finite("weight_ap_pos", cfg.weight_ap_pos)?;
    non_negative_finite("weight_ap_neg", cfg.weight_ap_neg)?;
    non_negative_finite("weight_aa_neg", cfg.weight_aa_neg)?;
    non_negative_finite("weight_pp_neg", cfg.weight_pp_neg)?;
    non_negative_finite("weight_nca", cfg.weight_nca)?;
    non_negative_finite("weight_ce", cfg.weight_ce)?;
    check(
        cfg.labelled_fraction.is_finite() && cfg.labelled_fraction > 0.0 && cfg.labelled_fraction <= 1.0,
        "labelled_fraction",
        cfg.labelled_fraction,
        "must lie in (0, 1]",
    )?;
    check(cfg.encoder_depth >= 1, "encoder_depth", cfg.encoder_depth, "must be >= 1")?;
    check(cfg.hidden_channels >= 1, "hidden_channels", cfg.hidden_channels, "must be >= 1")?;
    check(
        cfg.kernel_size % 2 == 1,
        "kernel_size",
        cfg.kernel_size,
        "must be odd",
    )?;
    check(cfg.semantic_hidden >= 1, "semantic_hidden", cfg.semantic_hidden, "must be >= 1")?;
    check(cfg.scorer_hidden >= 1, "scorer_hidden", cfg.scorer_hidden, "must be >= 1")?;
    check(cfg.probe_epochs >= 1, "probe_epochs", cfg.probe_epochs, "must be >= 1")?;
    positive_finite("probe_lr", cfg.probe_lr)?;
    if let Some(t) = cfg.pseudo_label_threshold {
        check(
            t.is_finite() && (0.0..=1.0).contains(&t),
            "pseudo_label_threshold",
            t,
            "must lie in [0, 1]",
        )?;
    }
    Ok(cfg)
}

impl ExperimentConfig {
    /// Parses a flat JSON document, rejecting unknown keys, then validates.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::ConfigParse("top level must be a JSON object".into()))?;
        if let Some((key, _)) = obj.iter().find(|(_, v)| v.is_object() || v.is_array()) {
            return Err(Error::ConfigParse(format!("key `{key}`: nested values are not allowed")));
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::ConfigParse(e.to_string()))?;
        validate_config(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (compact) JSON form.
    pub fn hash_hex(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// k-means cluster count, falling back to the number of classes.
    pub fn clusters_for(&self, num_classes: usize) -> usize {
        self.num_clusters.unwrap_or(num_classes.max(2))
    }
}

/// Named ablations, each a fixed edit of the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoNca,
    NoDynamicClustering,
    NoAa,
    NoPp,
    NoApNeg,
    SupervisedOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoNca,
        Ablation::NoDynamicClustering,
        Ablation::NoAa,
        Ablation::NoPp,
        Ablation::NoApNeg,
        Ablation::SupervisedOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoNca => "no-nca",
            Ablation::NoDynamicClustering => "no-dynamic-clustering",
            Ablation::NoAa => "no-aa",
            Ablation::NoPp => "no-pp",
            Ablation::NoApNeg => "no-ap-neg",
            Ablation::SupervisedOnly => "supervised-only",
        }
    }

    pub fn apply(self, cfg: &mut ExperimentConfig) {
        match self {
            Ablation::NoNca => cfg.weight_nca = 0.0,
            Ablation::NoDynamicClustering => cfg.mask_mode = MaskMode::StaticInput,
            Ablation::NoAa => cfg.weight_aa_neg = 0.0,
            Ablation::NoPp => cfg.weight_pp_neg = 0.0,
            Ablation::NoApNeg => cfg.weight_ap_neg = 0.0,
            Ablation::SupervisedOnly => cfg.schedule = Schedule::SupervisedOnly,
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| invalid("ablate", s, "unknown ablation"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
