//! Speech enhancement toolkit built around a decoder-only token language model.
//!
//! The pipeline: degraded speech is simulated from clean corpora ([`degrade`]),
//! target speech is tokenized by a discrete codec with a 32-token global stream
//! and a 50 Hz semantic stream ([`codec`]), continuous conditioning features come
//! from a frozen encoder plus trainable adapter ([`cond`]), and an autoregressive
//! LM over task-tagged sequences ([`lm`]) unifies restoration, target-speaker
//! extraction and separation at inference time ([`orchestrate`]).

pub mod audio;
pub mod codec;
pub mod cond;
pub mod config;
pub mod degrade;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod lm;
pub mod manifest;
pub mod nn;
pub mod orchestrate;
pub mod rng;
pub mod synth;
pub mod train;

pub use audio::AudioBuffer;
pub use error::{Error, Result};

/// The only sample rate this toolkit operates at.
pub const SAMPLE_RATE: u32 = 16_000;

/// Samples per codec/conditioning frame (50 Hz at 16 kHz).
pub const HOP: usize = 320;

/// Analysis window length for the codec front-end.
pub const WINDOW: usize = 640;

/// Frames per second produced by the codec and the conditioning encoder.
pub const FRAME_RATE: u32 = 50;

/// Fixed length of the global (timbre) token stream.
pub const GLOBAL_TOKENS: usize = 32;

/// Operational mode of the sequence model.
///
/// `Sr` restores the (louder) speaker from a degraded recording, `Tse`
/// extracts the speaker whose timbre matches a reference utterance, and
/// `Rtse` extracts the speaker whose timbre does not match the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sr,
    Tse,
    Rtse,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Sr, Mode::Tse, Mode::Rtse];

    /// True for the modes that condition on a reference utterance.
    pub fn needs_reference(self) -> bool {
        matches!(self, Mode::Tse | Mode::Rtse)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Sr => "sr",
            Mode::Tse => "tse",
            Mode::Rtse => "rtse",
        })
    }
}
