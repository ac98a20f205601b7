//! Codec front-end: 50 Hz log-mel frames, utterance-level stat chunks for the
//! global stream, and the mel-to-waveform reconstruction path (filterbank
//! pseudo-inverse plus iterative phase estimation).

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;

use crate::audio::AudioBuffer;
use crate::dsp;
use crate::error::{Error, Result};
use crate::{GLOBAL_TOKENS, HOP, SAMPLE_RATE, WINDOW};

/// Absolute floor for mel power before the log, and the constant silent
/// frames land on.
pub const POWER_FLOOR: f64 = 1e-10;

/// Per-frame dynamic range: bands more than 40 dB below the frame peak are
/// floored. Keeps quiet bands within reach of the reconstruction path, whose
/// phase/filterbank error floor sits well above -200 dB.
const RELATIVE_FLOOR: f64 = 1e-4;

/// Iterations of iterative STFT phase estimation in reconstruction.
pub const PHASE_ITERS: usize = 32;

/// Log-mel frames at exactly 50 frames/sec: window 640, hop 320,
/// `ceil(samples/320)` rows, `n_mels` columns.
pub fn frame_features(buf: &AudioBuffer, n_mels: usize) -> Result<Array2<f64>> {
    if buf.len() < HOP {
        return Err(Error::Codec(format!(
            "input too short: {} samples, need at least one hop ({HOP})",
            buf.len()
        )));
    }
    buf.check_finite()?;
    let stft = dsp::Stft::new(WINDOW, HOP);
    let spec = stft.analyze(&buf.samples);
    let fb = dsp::mel_filterbank(n_mels, WINDOW, f64::from(SAMPLE_RATE));
    let frames = spec.nrows();
    let mut power = Array2::zeros((frames, stft.n_bins()));
    for t in 0..frames {
        for b in 0..stft.n_bins() {
            power[(t, b)] = spec[(t, b)].norm_sqr();
        }
    }
    let mel = power.dot(&fb.t());
    let mut out = Array2::zeros(mel.dim());
    for (i, row) in mel.rows().into_iter().enumerate() {
        let peak = row.iter().copied().fold(0.0f64, f64::max);
        let floor = (peak * RELATIVE_FLOOR).max(POWER_FLOOR);
        for (j, &p) in row.iter().enumerate() {
            out[(i, j)] = p.max(floor).ln();
        }
    }
    Ok(out)
}

/// Utterance-level statistics of the log-mel frames, chunked for the global
/// codebook: per-band mean then per-band variance, split into
/// [`GLOBAL_TOKENS`] equal sub-vectors.
///
/// Chunks are strided, not contiguous: chunk `c` holds
/// `stats[c], stats[c + 32], stats[c + 64], ...`, so every chunk mixes
/// low-band and high-band statistics and carries timbre information on its
/// own (contiguous chunks would cluster by band position instead of voice).
pub fn global_chunks(frames: &Array2<f64>) -> Vec<Array1<f64>> {
    let (mean, var) = dsp::row_stats(frames);
    let n_mels = frames.ncols();
    let mut stats = Vec::with_capacity(2 * n_mels);
    stats.extend(mean.iter().copied());
    stats.extend(var.iter().copied());
    let chunk_dim = stats.len() / GLOBAL_TOKENS;
    (0..GLOBAL_TOKENS)
        .map(|c| {
            Array1::from(
                (0..chunk_dim)
                    .map(|j| stats[c + GLOBAL_TOKENS * j])
                    .collect::<Vec<f64>>(),
            )
        })
        .collect()
}

/// Chunk dimension implied by the mel band count (2 stats per band split
/// into 32 chunks).
pub fn chunk_dim(n_mels: usize) -> usize {
    2 * n_mels / GLOBAL_TOKENS
}

/// Reassemble (mean, variance) from 32 decoded chunks, inverting the stride.
pub fn stats_from_chunks(chunks: &[Array1<f64>], n_mels: usize) -> (Array1<f64>, Array1<f64>) {
    let mut flat = vec![0.0f64; 2 * n_mels];
    for (c, chunk) in chunks.iter().enumerate() {
        for (j, &v) in chunk.iter().enumerate() {
            flat[c + GLOBAL_TOKENS * j] = v;
        }
    }
    let mean = Array1::from(flat[..n_mels].to_vec());
    let var = Array1::from(flat[n_mels..2 * n_mels].to_vec()).mapv(|v: f64| v.max(0.0));
    (mean, var)
}

/// Multiplicative-update iterations for the non-negative mel inversion.
const NNLS_ITERS: usize = 30;

/// Non-negative linear power spectra `P >= 0` minimizing `||P FB^T - M||`,
/// by multiplicative updates seeded from the clipped ridge pseudo-inverse.
fn mel_to_linear_power(mel_power: &Array2<f64>, fb: &Array2<f64>) -> Array2<f64> {
    let pinv = dsp::ridge_pseudo_inverse(fb, 1e-8);
    let mut p = mel_power.dot(&pinv.t()).mapv(|v: f64| v.max(1e-14));
    let gram = fb.t().dot(fb); // (n_bins, n_bins)
    let target = mel_power.dot(fb); // (T, n_bins)
    for _ in 0..NNLS_ITERS {
        let denom = p.dot(&gram);
        for ((v, &num), &den) in p.iter_mut().zip(target.iter()).zip(denom.iter()) {
            *v *= num / den.max(1e-14);
        }
    }
    p
}

/// Waveform from log-mel frames: invert the filterbank by non-negative least
/// squares, then estimate phase iteratively. Output length is exactly
/// `frames * HOP`.
pub fn reconstruct(frames: &Array2<f64>) -> AudioBuffer {
    let n_mels = frames.ncols();
    let fb = dsp::mel_filterbank(n_mels, WINDOW, f64::from(SAMPLE_RATE));
    let mel_power = frames.mapv(f64::exp);
    let lin_power = mel_to_linear_power(&mel_power, &fb);
    let magnitude = lin_power.mapv(f64::sqrt);

    let stft = dsp::Stft::new(WINDOW, HOP);
    let t = magnitude.nrows();
    let n_bins = magnitude.ncols();
    let out_len = t * HOP;

    // Momentum-accelerated phase estimation. Initial phase advances linearly
    // with the hop per bin, which is consistent for locally stationary
    // signals and converges far faster than a zero-phase start.
    let momentum = 0.99;
    let mut spectra = Array2::from_shape_fn((t, n_bins), |(i, b)| {
        let phase = std::f64::consts::TAU * (b * HOP * i) as f64 / WINDOW as f64;
        Complex::from_polar(magnitude[(i, b)], phase)
    });
    let mut prev = spectra.clone();
    let mut wav = stft.synthesize(&spectra);
    for _ in 0..PHASE_ITERS {
        let est = stft.analyze(&wav);
        for i in 0..t {
            for b in 0..n_bins {
                let accel = est[(i, b)] + (est[(i, b)] - prev[(i, b)]) * momentum;
                prev[(i, b)] = est[(i, b)];
                spectra[(i, b)] = Complex::from_polar(magnitude[(i, b)], accel.arg());
            }
        }
        wav = stft.synthesize(&spectra);
    }
    wav.truncate(out_len);
    AudioBuffer::new(wav)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, len: usize) -> AudioBuffer {
        AudioBuffer::new(
            (0..len)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
                .collect(),
        )
    }

    #[test]
    fn five_seconds_gives_250_frames() {
        let f = frame_features(&tone(200.0, 80_000), 64).unwrap();
        assert_eq!(f.nrows(), 250);
        assert_eq!(f.ncols(), 64);
    }

    #[test]
    fn ceiling_boundary_one_extra_sample() {
        let f = frame_features(&tone(200.0, 16_001), 64).unwrap();
        assert_eq!(f.nrows(), 51);
    }

    #[test]
    fn silence_hits_log_floor_everywhere() {
        let f = frame_features(&AudioBuffer::zeros(3200), 32).unwrap();
        let floor = POWER_FLOOR.ln();
        for v in f.iter() {
            assert_eq!(*v, floor);
        }
    }

    #[test]
    fn too_short_input_rejected() {
        assert!(frame_features(&AudioBuffer::zeros(100), 32).is_err());
    }

    #[test]
    fn chunks_round_trip_stats() {
        let f = frame_features(&tone(440.0, 16_000), 64).unwrap();
        let chunks = global_chunks(&f);
        assert_eq!(chunks.len(), 32);
        assert_eq!(chunks[0].len(), chunk_dim(64));
        let (mean, var) = stats_from_chunks(&chunks, 64);
        let (m0, v0) = dsp::row_stats(&f);
        for i in 0..64 {
            assert!((mean[i] - m0[i]).abs() < 1e-12);
            assert!((var[i] - v0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruct_length_contract() {
        let f = frame_features(&tone(330.0, 16_000), 32).unwrap();
        let wav = reconstruct(&f);
        assert_eq!(wav.len(), f.nrows() * HOP);
    }

    #[test]
    fn reconstruct_keeps_tone_peak() {
        // A pure tone should reconstruct with its spectral peak at the same bin.
        let x = tone(500.0, 32_000);
        let f = frame_features(&x, 64).unwrap();
        let y = reconstruct(&f);
        let spec = dsp::magnitude_spectrum(&y.samples[3200..19_200]);
        let peak = spec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let hz = peak as f64 * 16_000.0 / 16_000.0;
        assert!((hz - 500.0).abs() < 40.0, "peak at {hz} Hz");
    }
}
