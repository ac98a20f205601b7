//! Discrete speech codec with a two-stream interface: a fixed-length
//! 32-token global stream tied to speaker/timbre statistics and a 50 Hz
//! semantic stream tied to content.
//!
//! Encode is nearest-codeword assignment over log-mel frames (semantic) and
//! utterance statistic chunks (global); decode looks codewords back up,
//! corrects the spectral envelope toward the global statistics and runs
//! iterative phase reconstruction.

pub mod features;
pub mod kmeans;

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::{dsp, GLOBAL_TOKENS};

/// Exactly 32 codebook indices, independent of utterance duration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalTokens {
    pub ids: Vec<u32>,
}

impl GlobalTokens {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.len() != GLOBAL_TOKENS {
            return Err(Error::Codec(format!(
                "global stream must have {GLOBAL_TOKENS} tokens, got {}",
                ids.len()
            )));
        }
        Ok(GlobalTokens { ids })
    }
}

/// Content tokens at 50 per second; `len == ceil(duration_sec * 50)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticTokens {
    pub ids: Vec<u32>,
}

impl SemanticTokens {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Trained two-codebook codec.
#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    /// Semantic codebook, `(k_s, n_mels)`.
    pub semantic: Array2<f64>,
    /// Global codebook over stat chunks, `(k_g, 2 * n_mels / 32)`.
    pub global: Array2<f64>,
    pub n_mels: usize,
}

impl Codec {
    pub fn k_s(&self) -> usize {
        self.semantic.nrows()
    }

    pub fn k_g(&self) -> usize {
        self.global.nrows()
    }

    /// Fit both codebooks on a clean corpus.
    ///
    /// The semantic codebook is k-means over all log-mel frames; the global
    /// codebook is k-means over per-utterance stat chunks.
    pub fn train(corpus: &[AudioBuffer], k_s: usize, k_g: usize, n_mels: usize, seed: u64) -> Result<Codec> {
        if corpus.is_empty() {
            return Err(Error::Codec("empty training corpus".into()));
        }
        if !(2 * n_mels).is_multiple_of(GLOBAL_TOKENS) {
            return Err(Error::Codec(format!(
                "n_mels = {n_mels} must make 2*n_mels divisible by {GLOBAL_TOKENS}"
            )));
        }
        let mut frame_rows: Vec<Array2<f64>> = Vec::with_capacity(corpus.len());
        let mut chunk_rows: Vec<Array1<f64>> = Vec::new();
        for buf in corpus {
            let frames = features::frame_features(buf, n_mels)?;
            chunk_rows.extend(features::global_chunks(&frames));
            frame_rows.push(frames);
        }
        let all_frames = ndarray::concatenate(
            Axis(0),
            &frame_rows.iter().map(|f| f.view()).collect::<Vec<_>>(),
        )
        .expect("frame concat");
        let chunk_dim = features::chunk_dim(n_mels);
        let mut chunks = Array2::zeros((chunk_rows.len(), chunk_dim));
        for (i, c) in chunk_rows.iter().enumerate() {
            chunks.row_mut(i).assign(c);
        }
        let semantic = kmeans::fit(&all_frames, k_s, crate::rng::derive_seed(seed, "semantic", 0))?;
        let global = kmeans::fit(&chunks, k_g, crate::rng::derive_seed(seed, "global", 0))?;
        Ok(Codec {
            semantic,
            global,
            n_mels,
        })
    }

    /// Tokenize a buffer into its global and semantic streams.
    pub fn encode(&self, buf: &AudioBuffer) -> Result<(GlobalTokens, SemanticTokens)> {
        let frames = features::frame_features(buf, self.n_mels)?;
        let semantic_ids: Vec<u32> = frames
            .rows()
            .into_iter()
            .map(|f| kmeans::nearest(&self.semantic, f) as u32)
            .collect();
        let global_ids: Vec<u32> = features::global_chunks(&frames)
            .iter()
            .map(|c| kmeans::nearest(&self.global, c.view()) as u32)
            .collect();
        Ok((
            GlobalTokens::new(global_ids)?,
            SemanticTokens { ids: semantic_ids },
        ))
    }

    /// Reconstruct a waveform of exactly `s.len() * HOP` samples.
    pub fn decode(&self, g: &GlobalTokens, s: &SemanticTokens) -> Result<AudioBuffer> {
        if s.is_empty() {
            return Err(Error::Codec("empty semantic stream".into()));
        }
        for (pos, &id) in g.ids.iter().enumerate() {
            if id as usize >= self.k_g() {
                return Err(Error::Codec(format!(
                    "global token {id} out of range [0, {}) at position {pos}",
                    self.k_g()
                )));
            }
        }
        for (pos, &id) in s.ids.iter().enumerate() {
            if id as usize >= self.k_s() {
                return Err(Error::Codec(format!(
                    "semantic token {id} out of range [0, {}) at position {pos}",
                    self.k_s()
                )));
            }
        }
        let t = s.len();
        let mut frames = Array2::zeros((t, self.n_mels));
        for (i, &id) in s.ids.iter().enumerate() {
            frames.row_mut(i).assign(&self.semantic.row(id as usize));
        }
        // Envelope correction: pull each band's mean toward the decoded
        // global statistics wherever the semantic stream disagrees by more
        // than the deadband. The deadband keeps near-exact round trips on
        // their codewords; the correction engages when generated semantic
        // tokens carry the wrong long-term envelope.
        const SHIFT_DEADBAND: f64 = 0.5;
        let chunks: Vec<Array1<f64>> = g
            .ids
            .iter()
            .map(|&id| self.global.row(id as usize).to_owned())
            .collect();
        let (mean_g, _var_g) = features::stats_from_chunks(&chunks, self.n_mels);
        let (mean_d, _) = dsp::row_stats(&frames);
        for b in 0..self.n_mels {
            let raw = mean_g[b] - mean_d[b];
            let shift = raw.signum() * (raw.abs() - SHIFT_DEADBAND).max(0.0);
            for i in 0..t {
                frames[(i, b)] += shift;
            }
        }
        Ok(features::reconstruct(&frames))
    }
}

const MAGIC: &[u8; 8] = b"SPCODEC\x01";
const VERSION: u32 = 1;

/// Write the codec checkpoint: magic, version, K_s, K_g, D, then both
/// codebooks row-major as little-endian f32.
pub fn save(codec: &Codec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(codec.k_s() as u32).to_le_bytes());
    out.extend_from_slice(&(codec.k_g() as u32).to_le_bytes());
    out.extend_from_slice(&(codec.n_mels as u32).to_le_bytes());
    for v in codec.semantic.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in codec.global.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Codec> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let fail = |detail: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    if bytes.len() < 20 || &bytes[0..8] != MAGIC {
        return Err(fail("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(8) != VERSION {
        return Err(fail("unsupported version"));
    }
    let k_s = word(12) as usize;
    let k_g = word(16) as usize;
    let n_mels = word(20) as usize;
    let chunk_dim = features::chunk_dim(n_mels);
    let expect = 24 + 4 * (k_s * n_mels + k_g * chunk_dim);
    if bytes.len() != expect {
        return Err(fail(&format!(
            "size mismatch: {} bytes, expected {expect}",
            bytes.len()
        )));
    }
    let mut off = 24;
    let mut read_matrix = |rows: usize, cols: usize| -> Array2<f64> {
        let mut m = Array2::zeros((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                m[(i, j)] = f64::from(v);
                off += 4;
            }
        }
        m
    };
    let semantic = read_matrix(k_s, n_mels);
    let global = read_matrix(k_g, chunk_dim);
    Ok(Codec {
        semantic,
        global,
        n_mels,
    })
}
