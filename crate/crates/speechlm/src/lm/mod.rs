//! Decoder-only autoregressive sequence model over codec tokens and
//! continuous conditions: vocabulary, mode-specific sequence assembly,
//! causal forward/backward, masked NLL, and constrained generation.

pub mod config;
pub mod generate;
pub mod layout;
pub mod model;
pub mod vocab;

pub use config::{default_ffn_dim, param_count, ModelConfig, ParamCount};
pub use generate::{forward_cached, generate, GenOutput, KvCache, Sampler};
pub use layout::{inference_prefix, training_layout, Item, SequenceLayout};
pub use model::{dlogits, masked_accuracy, nll_mean, nll_sum, LmGrads, LmModel};
pub use vocab::{Special, Vocab};
