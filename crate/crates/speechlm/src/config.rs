//! Run configuration: one TOML file with sections per subsystem, a stable
//! content hash embedded in produced artifacts, and flag overrides applied
//! by the command line on top of file values.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cond::EncoderConfig;
use crate::degrade::DegradeSpec;
use crate::error::{Error, Result};
use crate::lm::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub k_s: usize,
    pub k_g: usize,
    pub n_mels: usize,
    pub train_seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            k_s: 1024,
            k_g: 256,
            n_mels: 64,
            train_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 means all available cores.
    pub threads: usize,
    pub segment_sec: Option<f64>,
    pub degrade: DegradeSpec,
    pub codec: CodecConfig,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.degrade.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.k_s != self.codec.k_s || self.model.k_g != self.codec.k_g {
            return Err(Error::Config(format!(
                "model vocabulary ({}, {}) disagrees with codec sizes ({}, {})",
                self.model.k_s, self.model.k_g, self.codec.k_s, self.codec.k_g
            )));
        }
        if self.encoder.d_lm != self.model.hidden {
            return Err(Error::Config(format!(
                "encoder adapter output {} disagrees with model hidden {}",
                self.encoder.d_lm, self.model.hidden
            )));
        }
        Ok(())
    }

    /// Propagate the top-level seed into per-subsystem seeds that were left
    /// at their defaults, so one `seed = N` line controls the whole run.
    pub fn seed_subsystems(&mut self) {
        if self.train.seed == TrainConfig::default().seed {
            self.train.seed = self.seed;
        }
        if self.codec.train_seed == CodecConfig::default().train_seed {
            self.codec.train_seed = self.seed;
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.seed_subsystems();
    cfg.validate()?;
    Ok(cfg)
}

/// Stable content hash of a config (hex, first 16 chars of SHA-256 over the
/// canonical TOML serialization).
pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = toml::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    hex_prefix(&digest, 16)
}

/// SHA-256 of a file's bytes (full hex), for artifact identity checks.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(hex_prefix(&digest, 64))
}

fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s.truncate(chars);
    s
}

/// Sidecar metadata written next to produced artifacts (`<file>.meta`):
/// line-oriented `key\tvalue` pairs.
pub fn write_meta(path: impl AsRef<Path>, entries: &[(&str, String)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(&format!("{k}\t{v}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('\t'))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_hashable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let h = config_hash(&cfg);
        assert_eq!(h.len(), 16);
        assert_eq!(h, config_hash(&RunConfig::default()));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = config_hash(&RunConfig::default());
        let mut cfg = RunConfig::default();
        cfg.seed = 99;
        assert_ne!(base, config_hash(&cfg));
        let mut cfg2 = RunConfig::default();
        cfg2.degrade.noise_prob = 0.5;
        assert_ne!(base, config_hash(&cfg2));
    }

    #[test]
    fn toml_round_trip_with_partial_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "seed = 7\n[model]\nlayers = 2\nhidden = 64\nheads = 4\nk_s = 32\nk_g = 8\n[codec]\nk_s = 32\nk_g = 8\nn_mels = 32\n[encoder]\nd_lm = 64\n[train]\nbatch_size = 2\n",
        )
        .unwrap();
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.layers, 2);
        assert_eq!(cfg.model.hidden, 64);
        // Untouched fields keep defaults.
        assert_eq!(cfg.train.epochs, 30);
        assert_eq!(cfg.degrade.noise_prob, 0.8);
        // Top-level seed propagated.
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.codec.train_seed, 7);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let mut cfg = RunConfig::default();
        cfg.codec.k_s = 12;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn meta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.meta");
        write_meta(&p, &[("config_hash", "abc".into()), ("seed", "7".into())]).unwrap();
        let back = read_meta(&p).unwrap();
        assert_eq!(back[0], ("config_hash".to_string(), "abc".to_string()));
        assert_eq!(back[1].1, "7");
    }
}
