//! Shared DSP primitives: windows, STFT/ISTFT, FFT convolution, mel
//! filterbanks and a small SPD solver for the filterbank pseudo-inverse.
//!
//! Everything here is f64 and deterministic; frame-count arithmetic follows
//! the crate-wide convention `frames = ceil(samples / HOP)` with the analysis
//! window anchored at `t * HOP` and zero-padding past the signal tail.

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Periodic Blackman window.
pub fn blackman(len: usize) -> Vec<f64> {
    let n = len as f64;
    (0..len)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n;
            0.42 - 0.5 * x.cos() + 0.08 * (2.0 * x).cos()
        })
        .collect()
}

/// Number of analysis frames for a signal: `ceil(samples / hop)`.
pub fn frame_count(samples: usize, hop: usize) -> usize {
    samples.div_ceil(hop)
}

/// Short-time Fourier transform with a fixed window/hop, frame `t` reading
/// samples `[t*hop, t*hop + n_fft)` (zero-padded past the end).
pub struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<f64>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        Stft {
            n_fft,
            hop,
            window: hann(n_fft),
        }
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Complex spectra, one row per frame; `ceil(len/hop)` rows.
    pub fn analyze(&self, samples: &[f64]) -> Array2<Complex<f64>> {
        let frames = frame_count(samples.len(), self.hop);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(self.n_fft);
        let mut out = Array2::zeros((frames, self.n_bins()));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = t * self.hop;
            for j in 0..self.n_fft {
                let s = samples.get(start + j).copied().unwrap_or(0.0);
                buf[j] = Complex::new(s * self.window[j], 0.0);
            }
            fft.process(&mut buf);
            for (b, v) in buf.iter().take(self.n_bins()).enumerate() {
                out[(t, b)] = *v;
            }
        }
        out
    }

    /// Inverse STFT by windowed overlap-add, normalized by the summed squared
    /// window. Output has exactly `frames * hop` samples.
    pub fn synthesize(&self, spectra: &Array2<Complex<f64>>) -> Vec<f64> {
        let frames = spectra.nrows();
        let mut planner = FftPlanner::new();
        let ifft = planner.plan_fft_inverse(self.n_fft);
        let total = frames * self.hop + (self.n_fft - self.hop);
        let mut acc = vec![0.0f64; total];
        let mut wsum = vec![0.0f64; total];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            // Rebuild the full conjugate-symmetric spectrum.
            for b in 0..self.n_bins() {
                buf[b] = spectra[(t, b)];
            }
            for b in self.n_bins()..self.n_fft {
                buf[b] = spectra[(t, self.n_fft - b)].conj();
            }
            ifft.process(&mut buf);
            let start = t * self.hop;
            for j in 0..self.n_fft {
                let v = buf[j].re / self.n_fft as f64;
                acc[start + j] += v * self.window[j];
                wsum[start + j] += self.window[j] * self.window[j];
            }
        }
        let mut out = vec![0.0f64; frames * self.hop];
        for i in 0..out.len() {
            out[i] = acc[i] / wsum[i].max(1e-8);
        }
        out
    }
}

/// Full linear convolution via FFT; output length `a.len() + b.len() - 1`.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = out_len.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);
    let mut fa: Vec<Complex<f64>> = a.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fa.resize(n, Complex::new(0.0, 0.0));
    let mut fb: Vec<Complex<f64>> = b.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fb.resize(n, Complex::new(0.0, 0.0));
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= *y;
    }
    ifft.process(&mut fa);
    fa.truncate(out_len);
    fa.iter().map(|c| c.re / n as f64).collect()
}

/// Magnitude spectrum of a whole signal (single FFT), for test oracles and
/// metric code. Returns `len/2 + 1` magnitudes.
pub fn magnitude_spectrum(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf.iter().take(n / 2 + 1).map(|c| c.norm()).collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, peak-normalized, `(n_mels, n_bins)`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let fmin = 0.0;
    let fmax = sample_rate / 2.0;
    let mel_lo = hz_to_mel(fmin);
    let mel_hi = hz_to_mel(fmax);
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (centers[m], centers[m + 1], centers[m + 2]);
        for b in 0..n_bins {
            let f = b as f64 * sample_rate / n_fft as f64;
            let w = if f >= lo && f <= mid {
                (f - lo) / (mid - lo).max(1e-12)
            } else if f > mid && f <= hi {
                (hi - f) / (hi - mid).max(1e-12)
            } else {
                0.0
            };
            fb[(m, b)] = w;
        }
    }
    fb
}

/// Solve `A x = b` for SPD `A` by Cholesky; used for small systems like the
/// mel pseudo-inverse. Panics on non-SPD input.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.nrows(), n);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                assert!(s > 0.0, "matrix not positive definite");
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    let m = b.ncols();
    let mut x = b.clone();
    // Forward solve L y = b.
    for c in 0..m {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        // Back solve L^T x = y.
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Ridge pseudo-inverse `M^T (M M^T + lambda I)^-1` of a wide matrix,
/// mapping filterbank outputs back to spectrum bins (min-norm solution).
pub fn ridge_pseudo_inverse(m: &Array2<f64>, lambda: f64) -> Array2<f64> {
    let gram = m.dot(&m.t());
    let n = gram.nrows();
    let mut reg = gram;
    for i in 0..n {
        reg[(i, i)] += lambda;
    }
    let inv = cholesky_solve(&reg, &Array2::eye(n));
    m.t().dot(&inv)
}

/// Linear-phase windowed-sinc low-pass FIR, DC gain exactly 1.
pub fn design_lowpass_fir(cutoff_hz: f64, taps: usize, sample_rate: f64) -> Vec<f64> {
    assert!(taps % 2 == 1, "odd tap count required for integer group delay");
    let fc = cutoff_hz / sample_rate;
    let mid = (taps / 2) as isize;
    let win = blackman(taps);
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let n = i as isize - mid;
            let sinc = if n == 0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * n as f64).sin() / (std::f64::consts::PI * n as f64)
            };
            sinc * win[i]
        })
        .collect();
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

/// Mean and per-dimension variance over the rows of a matrix.
pub fn row_stats(frames: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let t = frames.nrows().max(1) as f64;
    let mean = frames.sum_axis(ndarray::Axis(0)) / t;
    let mut var = Array1::<f64>::zeros(frames.ncols());
    for row in frames.rows() {
        for (j, v) in row.iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    var /= t;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_is_ceil() {
        assert_eq!(frame_count(80_000, 320), 250);
        assert_eq!(frame_count(16_001, 320), 51);
        assert_eq!(frame_count(1, 320), 1);
        assert_eq!(frame_count(320, 320), 1);
        assert_eq!(frame_count(321, 320), 2);
    }

    #[test]
    fn convolution_matches_direct_oracle() {
        let a = [1.0, 2.0, -1.0, 0.5];
        let b = [0.5, -0.25, 1.0];
        let got = fft_convolve(&a, &b);
        // Direct O(n^2) oracle.
        let mut want = vec![0.0; a.len() + b.len() - 1];
        for (i, &x) in a.iter().enumerate() {
            for (j, &y) in b.iter().enumerate() {
                want[i + j] += x * y;
            }
        }
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn stft_round_trip_reconstructs_interior() {
        let stft = Stft::new(640, 320);
        let n = 320 * 20;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let spec = stft.analyze(&x);
        assert_eq!(spec.nrows(), 20);
        let y = stft.synthesize(&spec);
        assert_eq!(y.len(), n);
        // Interior samples (past the first partial-overlap region) reconstruct.
        for i in 640..n - 640 {
            assert!((x[i] - y[i]).abs() < 1e-8, "sample {i}: {} vs {}", x[i], y[i]);
        }
    }

    #[test]
    fn lowpass_dc_gain_is_unity() {
        let h = design_lowpass_fir(2000.0, 257, 16_000.0);
        let sum: f64 = h.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mel_filterbank_covers_all_bins() {
        let fb = mel_filterbank(64, 640, 16_000.0);
        assert_eq!(fb.dim(), (64, 321));
        // Every interior bin is touched by at least one filter.
        for b in 1..320 {
            let col_max = (0..64).map(|m| fb[(m, b)]).fold(0.0f64, f64::max);
            assert!(col_max > 0.0, "bin {b} uncovered");
        }
    }

    #[test]
    fn ridge_pinv_recovers_filterbank_outputs() {
        let fb = mel_filterbank(32, 256, 16_000.0);
        let pinv = ridge_pseudo_inverse(&fb, 1e-10);
        // M * pinv should be close to identity on the mel side.
        let prod = fb.dot(&pinv);
        for i in 0..32 {
            for j in 0..32 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (prod[(i, j)] - want).abs() < 1e-3,
                    "({i},{j}) = {}",
                    prod[(i, j)]
                );
            }
        }
    }
}
