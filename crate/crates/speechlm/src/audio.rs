//! Mono 16 kHz audio buffers and RIFF/WAV file I/O.
//!
//! Canonical on-disk format is PCM16 mono 16 kHz. Readers also accept 32-bit
//! float WAVs. Anything else (sample rate, channel count, bit depth) is
//! rejected rather than resampled.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

/// Mono sample sequence at 16 kHz, amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl AudioBuffer {
    /// Wrap samples at the fixed 16 kHz rate.
    pub fn new(samples: Vec<f64>) -> Self {
        AudioBuffer {
            samples,
            sample_rate_hz: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        AudioBuffer::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    /// Mean power (mean of squared samples).
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Error if any sample is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::NonFiniteSample { index: i });
            }
        }
        Ok(())
    }

    /// Crop or zero-pad the tail so the buffer has exactly `len` samples.
    pub fn fit_length(&self, len: usize) -> AudioBuffer {
        let mut out = self.samples.clone();
        out.resize(len, 0.0);
        AudioBuffer::new(out)
    }
}

/// Outcome of a WAV write; `clamped` counts samples outside [-1, 1] that were
/// saturated to full scale.
#[derive(Debug, Clone, Copy, Default)]
pub struct WriteStats {
    pub clamped: usize,
}

const FMT_PCM: u16 = 1;
const FMT_FLOAT: u16 = 3;

fn read_exact_or(path: &Path, r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::MalformedWav {
        path: path.to_path_buf(),
        detail: format!("unexpected end of file while reading {what}"),
    })
}

/// Read a mono 16 kHz WAV file (PCM16 or float32) into an [`AudioBuffer`].
///
/// PCM16 values are scaled by 1/32768 so full-scale 32767 maps to 32767/32768.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hdr = [0u8; 12];
    read_exact_or(path, &mut file, &mut hdr, "RIFF header")?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::MalformedWav {
            path: path.to_path_buf(),
            detail: "missing RIFF/WAVE magic".into(),
        });
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    loop {
        let mut chunk_hdr = [0u8; 8];
        read_exact_or(path, &mut file, &mut chunk_hdr, "chunk header")?;
        let id = [chunk_hdr[0], chunk_hdr[1], chunk_hdr[2], chunk_hdr[3]];
        let size = u32::from_le_bytes([chunk_hdr[4], chunk_hdr[5], chunk_hdr[6], chunk_hdr[7]]);
        match &id {
            b"fmt " => {
                let mut body = vec![0u8; size as usize];
                read_exact_or(path, &mut file, &mut body, "fmt chunk")?;
                if body.len() < 16 {
                    return Err(Error::MalformedWav {
                        path: path.to_path_buf(),
                        detail: "fmt chunk too short".into(),
                    });
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => {
                let (format, channels, rate, bits) = fmt.ok_or_else(|| Error::MalformedWav {
                    path: path.to_path_buf(),
                    detail: "data chunk before fmt chunk".into(),
                })?;
                if channels != 1 {
                    return Err(Error::UnsupportedWav {
                        path: path.to_path_buf(),
                        what: "channel count",
                        value: channels.to_string(),
                        expected: "1 (mono)".into(),
                    });
                }
                if rate != SAMPLE_RATE {
                    return Err(Error::UnsupportedWav {
                        path: path.to_path_buf(),
                        what: "sample rate",
                        value: rate.to_string(),
                        expected: SAMPLE_RATE.to_string(),
                    });
                }
                let mut body = vec![0u8; size as usize];
                read_exact_or(path, &mut file, &mut body, "data chunk")?;
                let samples = match (format, bits) {
                    (FMT_PCM, 16) => body
                        .chunks_exact(2)
                        .map(|c| f64::from(i16::from_le_bytes([c[0], c[1]])) / 32768.0)
                        .collect(),
                    (FMT_FLOAT, 32) => body
                        .chunks_exact(4)
                        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                        .collect(),
                    _ => {
                        return Err(Error::UnsupportedWav {
                            path: path.to_path_buf(),
                            what: "sample format",
                            value: format!("format {format}, {bits} bit"),
                            expected: "PCM16 or float32".into(),
                        })
                    }
                };
                return Ok(AudioBuffer::new(samples));
            }
            _ => {
                // Skip unknown chunks (word-aligned).
                let skip = u64::from(size) + u64::from(size % 2);
                std::io::copy(&mut std::io::Read::by_ref(&mut file).take(skip), &mut std::io::sink())
                    .map_err(|e| Error::io(path, e))?;
            }
        }
    }
}

/// Write a buffer as PCM16 mono 16 kHz. Samples outside [-1, 1] are clamped
/// to full scale and counted in the returned [`WriteStats`].
pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<WriteStats> {
    let path = path.as_ref();
    buf.check_finite()?;
    let mut stats = WriteStats::default();
    let mut pcm = Vec::with_capacity(buf.len() * 2);
    for &s in &buf.samples {
        let mut v = s;
        if !(-1.0..=1.0).contains(&v) {
            stats.clamped += 1;
            v = v.clamp(-1.0, 1.0);
        }
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        pcm.extend_from_slice(&q.to_le_bytes());
    }

    let data_len = pcm.len() as u32;
    let mut out = Vec::with_capacity(44 + pcm.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FMT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    out.extend_from_slice(&pcm);

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    #[test]
    fn silence_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        let buf = AudioBuffer::zeros(16_000);
        write_wav(&buf, &p).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.len(), 16_000);
        assert!(back.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale_value_scaling() {
        // Fixed-point oracle: i16 value v reads back as v / 32768.
        let dir = tempdir().unwrap();
        let p = dir.path().join("fs.wav");
        let mut raw = Vec::new();
        raw.extend_from_slice(b"RIFF");
        raw.extend_from_slice(&(36u32 + 2).to_le_bytes());
        raw.extend_from_slice(b"WAVE");
        raw.extend_from_slice(b"fmt ");
        raw.extend_from_slice(&16u32.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&16_000u32.to_le_bytes());
        raw.extend_from_slice(&32_000u32.to_le_bytes());
        raw.extend_from_slice(&2u16.to_le_bytes());
        raw.extend_from_slice(&16u16.to_le_bytes());
        raw.extend_from_slice(b"data");
        raw.extend_from_slice(&2u32.to_le_bytes());
        raw.extend_from_slice(&32767i16.to_le_bytes());
        std::fs::write(&p, raw).unwrap();
        let buf = read_wav(&p).unwrap();
        assert!((buf.samples[0] - 32767.0 / 32768.0).abs() < 1e-9);
    }

    #[test]
    fn stereo_is_rejected_with_channel_count_named() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("stereo.wav");
        let mut raw = Vec::new();
        raw.extend_from_slice(b"RIFF");
        raw.extend_from_slice(&(36u32 + 4).to_le_bytes());
        raw.extend_from_slice(b"WAVE");
        raw.extend_from_slice(b"fmt ");
        raw.extend_from_slice(&16u32.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&2u16.to_le_bytes()); // stereo
        raw.extend_from_slice(&16_000u32.to_le_bytes());
        raw.extend_from_slice(&64_000u32.to_le_bytes());
        raw.extend_from_slice(&4u16.to_le_bytes());
        raw.extend_from_slice(&16u16.to_le_bytes());
        raw.extend_from_slice(b"data");
        raw.extend_from_slice(&4u32.to_le_bytes());
        raw.extend_from_slice(&[0u8; 4]);
        std::fs::write(&p, raw).unwrap();
        let err = read_wav(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channel count") && msg.contains('2'), "{msg}");
    }

    #[test]
    fn wrong_rate_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("rate.wav");
        let mut raw = Vec::new();
        raw.extend_from_slice(b"RIFF");
        raw.extend_from_slice(&(36u32 + 2).to_le_bytes());
        raw.extend_from_slice(b"WAVE");
        raw.extend_from_slice(b"fmt ");
        raw.extend_from_slice(&16u32.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&44_100u32.to_le_bytes());
        raw.extend_from_slice(&88_200u32.to_le_bytes());
        raw.extend_from_slice(&2u16.to_le_bytes());
        raw.extend_from_slice(&16u16.to_le_bytes());
        raw.extend_from_slice(b"data");
        raw.extend_from_slice(&2u32.to_le_bytes());
        raw.extend_from_slice(&[0u8; 2]);
        std::fs::write(&p, raw).unwrap();
        let msg = read_wav(&p).unwrap_err().to_string();
        assert!(msg.contains("sample rate") && msg.contains("44100"), "{msg}");
    }

    #[test]
    fn float32_wav_reads_back() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("f32.wav");
        let samples = [0.25f32, -0.5, 0.999];
        let mut raw = Vec::new();
        raw.extend_from_slice(b"RIFF");
        raw.extend_from_slice(&(36u32 + 12).to_le_bytes());
        raw.extend_from_slice(b"WAVE");
        raw.extend_from_slice(b"fmt ");
        raw.extend_from_slice(&16u32.to_le_bytes());
        raw.extend_from_slice(&3u16.to_le_bytes()); // IEEE float
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.extend_from_slice(&16_000u32.to_le_bytes());
        raw.extend_from_slice(&64_000u32.to_le_bytes());
        raw.extend_from_slice(&4u16.to_le_bytes());
        raw.extend_from_slice(&32u16.to_le_bytes());
        raw.extend_from_slice(b"data");
        raw.extend_from_slice(&12u32.to_le_bytes());
        for s in samples {
            raw.extend_from_slice(&s.to_le_bytes());
        }
        std::fs::write(&p, raw).unwrap();
        let buf = read_wav(&p).unwrap();
        assert_eq!(buf.len(), 3);
        for (a, b) in buf.samples.iter().zip(samples) {
            assert!((a - f64::from(b)).abs() < 1e-9);
        }
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("trunc.wav");
        std::fs::write(&p, b"RIFF\x00\x00\x00\x00WAV").unwrap();
        assert!(read_wav(&p).is_err());
    }

    #[test]
    fn half_amplitude_round_trip_within_quantization_step() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("half.wav");
        let buf = AudioBuffer::new(vec![0.5; 100]);
        write_wav(&buf, &p).unwrap();
        let back = read_wav(&p).unwrap();
        // Quantization-step oracle: one PCM16 step is 2^-15.
        assert!((back.samples[0] - 0.5).abs() <= f64::powi(2.0, -15));
    }

    #[test]
    fn out_of_range_samples_clamp_and_report() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("hot.wav");
        let buf = AudioBuffer::new(vec![2.0, -3.0, 0.1]);
        let stats = write_wav(&buf, &p).unwrap();
        assert_eq!(stats.clamped, 2);
        let back = read_wav(&p).unwrap();
        assert!((back.samples[0] - 32767.0 / 32768.0).abs() < 1e-9);
        assert!((back.samples[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn nan_sample_is_rejected() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("nan.wav");
        let buf = AudioBuffer::new(vec![0.0, f64::NAN]);
        let err = write_wav(&buf, &p).unwrap_err();
        assert!(matches!(err, Error::NonFiniteSample { index: 1 }));
    }

    proptest! {
        #[test]
        fn round_trip_error_bounded_by_one_step(samples in proptest::collection::vec(-1.0f64..=1.0, 1..400)) {
            let dir = tempdir().unwrap();
            let p = dir.path().join("prop.wav");
            let buf = AudioBuffer::new(samples.clone());
            write_wav(&buf, &p).unwrap();
            let back = read_wav(&p).unwrap();
            prop_assert_eq!(back.len(), samples.len());
            for (a, b) in samples.iter().zip(&back.samples) {
                prop_assert!((a - b).abs() <= f64::powi(2.0, -15));
            }
        }
    }
}
