//! Intrusive proxy metrics: scale-invariant SDR, log-spectral distance, an
//! embedding-cosine speaker-similarity proxy from the frozen conditioning
//! encoder, and token-level accuracy.

use crate::audio::AudioBuffer;
use crate::codec::SemanticTokens;
use crate::cond::EncoderStack;
use crate::dsp;
use crate::error::{Error, Result};

/// Report ceiling for SI-SDR (perfect reconstructions would be infinite).
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Scale-invariant signal-to-distortion ratio in dB, capped at
/// [`SI_SDR_CAP_DB`]. The reference is rescaled by the optimal projection.
pub fn si_sdr(reference: &AudioBuffer, estimate: &AudioBuffer) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(Error::Eval(format!(
            "length mismatch: reference {} vs estimate {}",
            reference.len(),
            estimate.len()
        )));
    }
    let ref_pow: f64 = reference.samples.iter().map(|s| s * s).sum();
    if ref_pow == 0.0 {
        return Err(Error::Eval("zero reference signal".into()));
    }
    let dot: f64 = reference
        .samples
        .iter()
        .zip(&estimate.samples)
        .map(|(r, e)| r * e)
        .sum();
    let alpha = dot / ref_pow;
    let mut target_pow = 0.0f64;
    let mut err_pow = 0.0f64;
    for (r, e) in reference.samples.iter().zip(&estimate.samples) {
        let t = alpha * r;
        target_pow += t * t;
        let d = e - t;
        err_pow += d * d;
    }
    if err_pow == 0.0 || target_pow / err_pow > 10f64.powf(SI_SDR_CAP_DB / 10.0) {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok(10.0 * (target_pow / err_pow).log10())
}

const LSD_N_FFT: usize = 512;
const LSD_HOP: usize = 256;
const LSD_FLOOR: f64 = 1e-10;

/// Log-spectral distance in dB: per frame, the RMS over frequency bins of
/// the log-magnitude difference; averaged over frames.
pub fn log_spectral_distance(a: &AudioBuffer, b: &AudioBuffer) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!(
            "length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Eval("empty input".into()));
    }
    let stft = dsp::Stft::new(LSD_N_FFT, LSD_HOP);
    let sa = stft.analyze(&a.samples);
    let sb = stft.analyze(&b.samples);
    let frames = sa.nrows();
    let bins = sa.ncols();
    let mut total = 0.0f64;
    for t in 0..frames {
        let mut acc = 0.0f64;
        for f in 0..bins {
            let la = 20.0 * sa[(t, f)].norm().max(LSD_FLOOR).log10();
            let lb = 20.0 * sb[(t, f)].norm().max(LSD_FLOOR).log10();
            acc += (la - lb) * (la - lb);
        }
        total += (acc / bins as f64).sqrt();
    }
    Ok(total / frames as f64)
}

/// Cosine similarity of utterance-level embeddings from the frozen encoder.
pub fn speaker_sim(a: &AudioBuffer, b: &AudioBuffer, encoder: &EncoderStack) -> Result<f64> {
    if a.rms() == 0.0 || b.rms() == 0.0 {
        return Err(Error::Eval("silent input to speaker similarity".into()));
    }
    let ea = encoder.utterance_embedding(a)?;
    let eb = encoder.utterance_embedding(b)?;
    let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = ea.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    let nb: f64 = eb.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
    Ok(dot / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenAccuracy {
    pub accuracy: f64,
    /// Set when the streams had different lengths and the longer one was cut.
    pub truncated: bool,
}

/// Fraction of positions where the streams agree.
pub fn token_accuracy(pred: &SemanticTokens, gold: &SemanticTokens) -> TokenAccuracy {
    let n = pred.len().min(gold.len());
    if n == 0 {
        return TokenAccuracy {
            accuracy: 0.0,
            truncated: pred.len() != gold.len(),
        };
    }
    let hits = pred
        .ids
        .iter()
        .zip(&gold.ids)
        .take(n)
        .filter(|(a, b)| a == b)
        .count();
    TokenAccuracy {
        accuracy: hits as f64 / n as f64,
        truncated: pred.len() != gold.len(),
    }
}

/// Per-utterance metric rows plus corpus means.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub utterance_id: String,
    pub si_sdr_db: f64,
    pub lsd_db: f64,
    pub speaker_sim: Option<f64>,
}

impl MetricReport {
    pub fn mean_si_sdr(&self) -> f64 {
        self.rows.iter().map(|r| r.si_sdr_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_lsd(&self) -> f64 {
        self.rows.iter().map(|r| r.lsd_db).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_speaker_sim(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.speaker_sim).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}
