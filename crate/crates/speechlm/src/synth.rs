//! Deterministic synthetic corpora for tests and desk-scale runs: harmonic
//! "voices" with per-speaker timbre (f0 register plus spectral envelope) and
//! per-utterance content (pitch contour and syllable gating), plus noise and
//! impulse-response generators.

use rand::Rng;

use crate::audio::AudioBuffer;
use crate::rng;
use crate::SAMPLE_RATE;

/// Timbre parameters of one synthetic speaker.
#[derive(Debug, Clone)]
pub struct Voice {
    pub f0_hz: f64,
    /// Relative weight per harmonic; the spectral envelope.
    pub harmonic_weights: Vec<f64>,
}

/// Fixed, well-separated voice presets. Speakers alternate between a low
/// dark register and a high bright one so timbres are easy to tell apart.
pub fn voice(index: usize) -> Voice {
    let presets = [
        (115.0, 1.2, 1.8),
        (265.0, 5.0, 2.2),
        (150.0, 2.0, 1.5),
        (220.0, 7.0, 2.5),
    ];
    let (f0, peak, width) = presets[index % presets.len()];
    let n_harm = ((f64::from(SAMPLE_RATE) / 2.0 - 200.0) / f0).floor() as usize;
    let n_harm = n_harm.clamp(3, 14);
    let weights = (1..=n_harm)
        .map(|h| (-((h as f64 - peak) * (h as f64 - peak)) / (2.0 * width * width)).exp())
        .collect();
    Voice {
        f0_hz: f0,
        harmonic_weights: weights,
    }
}

/// Synthesize one utterance: the voice's harmonic stack under a seeded pitch
/// contour and syllable-style amplitude gating, RMS-normalized to 0.1.
pub fn utterance(voice: &Voice, len: usize, seed: u64) -> AudioBuffer {
    let mut r = rng::stream(seed, "utterance", 0);
    let fs = f64::from(SAMPLE_RATE);
    let contour_rate = r.gen_range(1.0..4.0);
    let contour_depth = r.gen_range(0.02..0.10);
    let contour_phase = r.gen_range(0.0..std::f64::consts::TAU);

    // Syllable gates: 80-240 ms segments at alternating strengths.
    let mut gates = Vec::new();
    let mut pos = 0usize;
    while pos < len {
        let seg = r.gen_range(1280..3840);
        let level = if r.gen_bool(0.25) {
            r.gen_range(0.1..0.3)
        } else {
            r.gen_range(0.7..1.0)
        };
        gates.push((pos, (pos + seg).min(len), level));
        pos += seg;
    }

    let mut phases: Vec<f64> = (0..voice.harmonic_weights.len())
        .map(|_| r.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut out = vec![0.0f64; len];
    let mut gate_idx = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        while gate_idx + 1 < gates.len() && i >= gates[gate_idx].1 {
            gate_idx += 1;
        }
        let level = gates[gate_idx].2;
        let t = i as f64 / fs;
        let f0 = voice.f0_hz
            * (1.0 + contour_depth * (std::f64::consts::TAU * contour_rate * t + contour_phase).sin());
        let mut s = 0.0;
        for (h, (w, ph)) in voice.harmonic_weights.iter().zip(phases.iter_mut()).enumerate() {
            *ph += std::f64::consts::TAU * (h as f64 + 1.0) * f0 / fs;
            s += w * ph.sin();
        }
        *o = s * level;
    }
    let rms = (out.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        let g = 0.1 / rms;
        out.iter_mut().for_each(|s| *s *= g);
    }
    AudioBuffer::new(out)
}

/// A labeled synthetic utterance.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub speaker: String,
    pub utterance_id: String,
    pub audio: AudioBuffer,
}

/// `n` utterances of length `len`, cycling over the voice presets.
pub fn toy_corpus(n: usize, len: usize, seed: u64) -> Vec<SynthUtterance> {
    (0..n)
        .map(|i| {
            let spk = i % 2;
            SynthUtterance {
                speaker: format!("spk{spk}"),
                utterance_id: format!("spk{spk}_u{i}"),
                audio: utterance(&voice(spk), len, rng::derive_seed(seed, "toy", i as u64)),
            }
        })
        .collect()
}

/// Two speakers, `per_speaker` utterances each.
pub fn two_speaker_corpus(per_speaker: usize, len: usize, seed: u64) -> Vec<Vec<AudioBuffer>> {
    (0..2)
        .map(|spk| {
            (0..per_speaker)
                .map(|i| {
                    utterance(
                        &voice(spk),
                        len,
                        rng::derive_seed(seed, "two_speaker", (spk * 10_000 + i) as u64),
                    )
                })
                .collect()
        })
        .collect()
}

/// Band-shaped noise: white noise smoothed by a short moving average, so it
/// has energy everywhere but is not spectrally flat.
pub fn noise(len: usize, seed: u64) -> AudioBuffer {
    let mut r = rng::stream(seed, "noise", 0);
    let white: Vec<f64> = (0..len + 8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0f64; len];
    for i in 0..len {
        out[i] = white[i..i + 8].iter().sum::<f64>() / 8.0 + 0.3 * white[i];
    }
    let rms = (out.iter().map(|s| s * s).sum::<f64>() / len as f64).sqrt();
    let g = 0.1 / rms;
    out.iter_mut().for_each(|s| *s *= g);
    AudioBuffer::new(out)
}

/// Synthetic room impulse response: direct path plus exponentially decaying
/// diffuse tail.
pub fn rir_taps(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "rir", 0);
    let direct = r.gen_range(8..32.min(len.max(9)));
    let mut taps = vec![0.0f64; len];
    taps[direct] = 1.0;
    let decay = r.gen_range(0.995..0.999);
    let mut env = 0.4;
    for (i, tap) in taps.iter_mut().enumerate().skip(direct + 1) {
        *tap += env * r.gen_range(-1.0..1.0);
        env *= decay;
        let _ = i;
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterances_are_deterministic() {
        let v = voice(0);
        let a = utterance(&v, 8000, 5);
        let b = utterance(&v, 8000, 5);
        assert_eq!(a.samples, b.samples);
        let c = utterance(&v, 8000, 6);
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn voices_have_distinct_spectra() {
        let a = utterance(&voice(0), 16_000, 1);
        let b = utterance(&voice(1), 16_000, 1);
        let sa = crate::dsp::magnitude_spectrum(&a.samples);
        let sb = crate::dsp::magnitude_spectrum(&b.samples);
        let centroid = |s: &[f64]| {
            let total: f64 = s.iter().sum();
            s.iter().enumerate().map(|(i, v)| i as f64 * v).sum::<f64>() / total
        };
        // Speaker 1 is much brighter than speaker 0.
        assert!(centroid(&sb) > 1.5 * centroid(&sa));
    }

    #[test]
    fn corpus_is_speaker_balanced() {
        let corpus = toy_corpus(10, 4000, 0);
        let a = corpus.iter().filter(|u| u.speaker == "spk0").count();
        assert_eq!(a, 5);
        let ids: std::collections::HashSet<&str> =
            corpus.iter().map(|u| u.utterance_id.as_str()).collect();
        assert_eq!(ids.len(), 10);
    }
}
