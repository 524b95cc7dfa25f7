//! Model state and its binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SMCNCA01"
//! u64 metadata length, metadata JSON
//! u32 array count
//! per array: u32 name length, name, u64 rows, u64 cols, rows*cols f64
//! ```
//!
//! Arrays are named `param/<name>`, `adam_m/<name>` and `adam_v/<name>`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::config::{validate_config, ExperimentConfig};
use crate::error::{Error, Result};
use crate::models::{Networks, ParamStore};
use crate::optim::Adam;
use crate::rng::{mix_seed, seeded_rng};

const MAGIC: &[u8; 8] = b"SMCNCA01";
const INIT_STREAM: u64 = 0x1A17;

/// Progress through the schedule. Every random draw of the trainer is keyed by these
/// counters and the seed, so they are the whole random state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Completed outer iterations.
    pub iterations: usize,
    pub optimizer_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ExperimentConfig,
    pub num_classes: usize,
    pub nets: Networks,
    pub params: ParamStore,
    pub adam: Adam,
    pub counters: Counters,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    config: ExperimentConfig,
    config_hash: String,
    num_classes: usize,
    seed: u64,
    phase: String,
    counters: Counters,
    adam_steps: Vec<u64>,
}

impl ModelState {
    /// Fresh networks initialized from the config seed.
    pub fn init(cfg: &ExperimentConfig, num_classes: usize) -> Self {
        let mut rng = seeded_rng(mix_seed(&[cfg.rng_seed, INIT_STREAM]));
        let (nets, params) = Networks::new(cfg, num_classes, &mut rng);
        let adam = Adam::new(&params);
        Self {
            config: cfg.clone(),
            num_classes,
            nets,
            params,
            adam,
            counters: Counters::default(),
        }
    }

    pub fn save(&self, path: &Path, phase: &str) -> Result<()> {
        let meta = Metadata {
            config: self.config.clone(),
            config_hash: self.config.hash_hex(),
            num_classes: self.num_classes,
            seed: self.config.rng_seed,
            phase: phase.to_string(),
            counters: self.counters,
            adam_steps: self.adam.moments.iter().map(|m| m.steps).collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let mut arrays: Vec<(String, &Mat)> = Vec::new();
        for id in self.params.ids() {
            let name = self.params.name(id);
            let mom = &self.adam.moments[id.index()];
            arrays.push((format!("param/{name}"), self.params.get(id)));
            arrays.push((format!("adam_m/{name}"), &mom.m));
            arrays.push((format!("adam_v/{name}"), &mom.v));
        }
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, m) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
                _ => Error::Io(e),
            })?
            .read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
        }
        let meta_len = r.u64()? as usize;
        let meta: Metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let config = validate_config(meta.config)?;
        if config.hash_hex() != meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let mut state = Self::init(&config, meta.num_classes);
        state.counters = meta.counters;
        if meta.adam_steps.len() != state.params.len() {
            return Err(Error::Checkpoint("optimizer state does not match the networks".into()));
        }
        let count = r.u32()? as usize;
        let mut seen = 0usize;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let raw = r.take(rows * cols * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((rows, cols), values).expect("sized");
            let (kind, pname) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("bad array name `{name}`")))?;
            let id = state
                .params
                .find(pname)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{pname}`")))?;
            let slot = match kind {
                "param" => state.params.get_mut(id),
                "adam_m" => &mut state.adam.moments[id.index()].m,
                "adam_v" => &mut state.adam.moments[id.index()].v,
                _ => return Err(Error::Checkpoint(format!("bad array kind `{kind}`"))),
            };
            if slot.dim() != m.dim() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    m.dim(),
                    slot.dim()
                )));
            }
            *slot = m;
            seen += 1;
        }
        if seen != 3 * state.params.len() || r.pos != bytes.len() {
            return Err(Error::Checkpoint("array set incomplete or trailing bytes".into()));
        }
        for (mom, steps) in state.adam.moments.iter_mut().zip(meta.adam_steps) {
            mom.steps = steps;
        }
        Ok((state, meta.phase))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            feature_dim: 3,
            embedding_dim: 4,
            hidden_channels: 5,
            semantic_hidden: 4,
            scorer_hidden: 4,
            encoder_depth: 2,
            rng_seed: 12,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut s = ModelState::init(&small_cfg(), 3);
        s.counters.stage1_epochs = 7;
        for (i, mom) in s.adam.moments.iter_mut().enumerate() {
            mom.m.fill(0.1 * i as f64 + 1e-17);
            mom.v.fill(std::f64::consts::PI);
            mom.steps = i as u64;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        s.save(&path, "stage1").unwrap();
        let (back, phase) = ModelState::load(&path).unwrap();
        assert_eq!(phase, "stage1");
        assert_eq!(back, s);
        for id in s.params.ids() {
            let a = s.params.get(id);
            let b = back.params.get(id);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn same_seed_same_init() {
        assert_eq!(ModelState::init(&small_cfg(), 3), ModelState::init(&small_cfg(), 3));
        let other = ExperimentConfig { rng_seed: 13, ..small_cfg() };
        assert_ne!(ModelState::init(&small_cfg(), 3).params, ModelState::init(&other, 3).params);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        ModelState::init(&small_cfg(), 3).save(&path, "pretrain").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(ModelState::load(&path), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(ModelState::load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(
            ModelState::load(&dir.path().join("missing.bin")),
            Err(Error::MissingFile(_))
        ));
    }
}
