//! Semi-supervised temporal action segmentation with semantic-guided multi-level
//! contrast and a neighbourhood-consistency loss.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrast;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod models;
pub mod nca;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod train;

pub use config::{validate_config, Ablation, ExperimentConfig, MaskMode, Schedule};
pub use error::{Error, Result};
