//! Backbone configuration and exact parameter counting.

use super::vocab::{Vocab, NUM_SPECIALS};
use crate::error::{Error, Result};

/// Gated-FFN inner dimension: 4/3 * 4 * hidden, rounded up to a multiple
/// of 64 (2752 for hidden 512).
pub fn default_ffn_dim(hidden: usize) -> usize {
    (16 * hidden).div_ceil(3).div_ceil(64) * 64
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub k_s: usize,
    pub k_g: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 12,
            heads: 8,
            hidden: 512,
            ffn_dim: default_ffn_dim(512),
            max_seq_len: 1024,
            k_s: 1024,
            k_g: 256,
            init_seed: 0x10ad,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.k_s, self.k_g)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().size()
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 {
            return Err(Error::Lm("hidden and heads must be positive".into()));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Lm(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Lm(format!(
                "head dim {} must be even for rotary embedding",
                self.head_dim()
            )));
        }
        if self.k_s == 0 || self.k_g == 0 {
            return Err(Error::Lm("codec vocabulary sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Exact trainable parameter counts of backbone + embeddings + output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Everything: embedding table, layers, final norm, output head.
    pub total: u64,
    /// Same minus the input embedding table.
    pub without_embeddings: u64,
    pub per_layer: u64,
}

pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let h = cfg.hidden as u64;
    let f = cfg.ffn_dim as u64;
    let v = (cfg.k_s + cfg.k_g + NUM_SPECIALS) as u64;
    let per_layer = 4 * h * h // wq wk wv wo
        + 3 * h * f // gate, up, down
        + 2 * h; // two norm gains
    let embed = v * h;
    let head = h * v;
    let total = embed + cfg.layers as u64 * per_layer + h + head;
    ParamCount {
        total,
        without_embeddings: total - embed,
        per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffn_rounding_matches_backbone_convention() {
        assert_eq!(default_ffn_dim(512), 2752);
        assert_eq!(default_ffn_dim(256), 1408);
    }

    #[test]
    fn zero_layers_is_embeddings_head_and_final_norm() {
        let cfg = ModelConfig {
            layers: 0,
            ..ModelConfig::default()
        };
        let v = cfg.vocab_size() as u64;
        let h = cfg.hidden as u64;
        let c = param_count(&cfg);
        assert_eq!(c.total, v * h + h * v + h);
        assert_eq!(c.without_embeddings, h * v + h);
    }

    #[test]
    fn doubling_layers_adds_exactly_per_layer_times_original() {
        let base = ModelConfig::default();
        let doubled = ModelConfig {
            layers: 24,
            ..base
        };
        let c1 = param_count(&base);
        let c2 = param_count(&doubled);
        assert_eq!(c2.total - c1.total, c1.per_layer * 12);
    }

    #[test]
    fn paper_scale_config_lands_near_63m() {
        let c = param_count(&ModelConfig::default());
        let lo = (63_000_000.0 * 0.8) as u64;
        let hi = (63_000_000.0 * 1.2) as u64;
        assert!(c.total >= lo && c.total <= hi, "total {}", c.total);
        assert!(
            c.without_embeddings >= lo && c.without_embeddings <= hi,
            "without embeddings {}",
            c.without_embeddings
        );
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut cfg = ModelConfig::default();
        cfg.heads = 7;
        assert!(cfg.validate().is_err());
        let cfg2 = ModelConfig {
            heads: 8,
            hidden: 8,
            ..ModelConfig::default()
        };
        // head_dim 1 is odd.
        assert!(cfg2.validate().is_err());
    }
}
