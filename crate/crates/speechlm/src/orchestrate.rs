//! Inference pipelines: fixed-length segmentation, the three single-mode
//! passes, and the chained separation procedure (restore the louder speaker,
//! use it as the reference to extract speaker one, then reverse-extract
//! speaker two).

use crate::audio::AudioBuffer;
use crate::codec::Codec;
use crate::cond::EncoderStack;
use crate::error::{Error, Result};
use crate::lm::{self, GenOutput, LmModel, Sampler};
use crate::rng;
use crate::{Mode, HOP, SAMPLE_RATE};

pub const DEFAULT_SEGMENT_SEC: f64 = 5.0;

/// Non-overlapping tiling of an input into fixed-length segments; the final
/// segment may be shorter (it is zero-padded for processing and trimmed on
/// output).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPlan {
    pub segment_len: usize,
    pub boundaries: Vec<(usize, usize)>,
}

pub fn segment(buf: &AudioBuffer, segment_sec: f64) -> Result<SegmentPlan> {
    if buf.is_empty() {
        return Err(Error::Stage {
            stage: "segment",
            detail: "empty input".into(),
        });
    }
    if segment_sec <= 0.0 {
        return Err(Error::Stage {
            stage: "segment",
            detail: format!("segment length {segment_sec} s must be positive"),
        });
    }
    let segment_len = (segment_sec * f64::from(SAMPLE_RATE)).round() as usize;
    let mut boundaries = Vec::new();
    let mut start = 0usize;
    while start < buf.len() {
        let end = (start + segment_len).min(buf.len());
        boundaries.push((start, end));
        start = end;
    }
    Ok(SegmentPlan {
        segment_len,
        boundaries,
    })
}

/// A trained model bundle plus decoding policy.
pub struct Pipeline<'a> {
    pub model: &'a LmModel,
    pub codec: &'a Codec,
    pub encoder: &'a EncoderStack,
    pub segment_sec: f64,
    pub sampler: Sampler,
    pub seed: u64,
}

/// Output audio plus per-segment token streams and any generation warnings.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub audio: AudioBuffer,
    pub segments: Vec<GenOutput>,
    pub warnings: Vec<String>,
}

impl<'a> Pipeline<'a> {
    pub fn new(model: &'a LmModel, codec: &'a Codec, encoder: &'a EncoderStack) -> Self {
        Pipeline {
            model,
            codec,
            encoder,
            segment_sec: DEFAULT_SEGMENT_SEC,
            sampler: Sampler::Greedy,
            seed: 0,
        }
    }

    fn run_mode(
        &self,
        mode: Mode,
        input: &AudioBuffer,
        reference: Option<&AudioBuffer>,
    ) -> Result<PipelineOutput> {
        let stage: &'static str = match mode {
            Mode::Sr => "sr",
            Mode::Tse => "tse",
            Mode::Rtse => "rtse",
        };
        let fail = |detail: String| Error::Stage { stage, detail };
        input.check_finite().map_err(|e| fail(e.to_string()))?;
        let plan = segment(input, self.segment_sec)?;
        let vocab = self.model.config.vocab();

        // Reference conditions are computed once and shared by all segments.
        let cond_r = match (mode.needs_reference(), reference) {
            (true, Some(r)) => {
                if r.is_empty() {
                    return Err(fail("empty reference".into()));
                }
                let fitted = r.fit_length(plan.segment_len);
                Some(
                    self.encoder
                        .extract(&fitted)
                        .map_err(|e| fail(e.to_string()))?,
                )
            }
            (true, None) => return Err(fail("missing reference audio".into())),
            (false, Some(_)) => return Err(fail("unexpected reference audio".into())),
            (false, None) => None,
        };

        let max_semantic = plan.segment_len.div_ceil(HOP);
        let mut audio = Vec::with_capacity(input.len());
        let mut segments = Vec::new();
        let mut warnings = Vec::new();
        for (si, &(start, end)) in plan.boundaries.iter().enumerate() {
            let seg = AudioBuffer::new(input.samples[start..end].to_vec());
            let padded = seg.fit_length(plan.segment_len);
            let cond_d = self
                .encoder
                .extract(&padded)
                .map_err(|e| fail(e.to_string()))?;
            let prefix = lm::inference_prefix(&vocab, mode, cond_d, cond_r.clone())
                .map_err(|e| fail(e.to_string()))?;
            let gen = lm::generate(
                self.model,
                &prefix,
                max_semantic,
                self.sampler,
                rng::derive_seed(self.seed, stage, si as u64),
            )
            .map_err(|e| fail(e.to_string()))?;
            if gen.truncated {
                warnings.push(format!("segment {si}: generation hit the length cap without an end token"));
            }
            let needed = end - start;
            if gen.semantic.is_empty() {
                warnings.push(format!("segment {si}: empty semantic stream, emitting silence"));
                audio.extend(std::iter::repeat_n(0.0, needed));
            } else {
                let decoded = self
                    .codec
                    .decode(&gen.global, &gen.semantic)
                    .map_err(|e| fail(e.to_string()))?;
                if decoded.len() < needed {
                    warnings.push(format!(
                        "segment {si}: decoded {} of {needed} samples, zero-padding",
                        decoded.len()
                    ));
                }
                let fitted = decoded.fit_length(needed);
                audio.extend_from_slice(&fitted.samples);
            }
            segments.push(gen);
        }
        debug_assert_eq!(audio.len(), input.len());
        Ok(PipelineOutput {
            audio: AudioBuffer::new(audio),
            segments,
            warnings,
        })
    }

    /// Restore clean speech (the louder speaker when two are present).
    pub fn run_sr(&self, input: &AudioBuffer) -> Result<PipelineOutput> {
        self.run_mode(Mode::Sr, input, None)
    }

    /// Extract the speaker whose timbre matches the reference.
    pub fn run_tse(&self, mixture: &AudioBuffer, reference: &AudioBuffer) -> Result<PipelineOutput> {
        self.run_mode(Mode::Tse, mixture, Some(reference))
    }

    /// Extract the speaker whose timbre does not match the reference.
    pub fn run_rtse(
        &self,
        mixture: &AudioBuffer,
        reference: &AudioBuffer,
    ) -> Result<PipelineOutput> {
        self.run_mode(Mode::Rtse, mixture, Some(reference))
    }

    /// Two-speaker separation: restore the louder speaker, use the result as
    /// the reference to extract speaker one, then reverse-extract speaker two
    /// with speaker one as the reference.
    pub fn run_ss(&self, mixture: &AudioBuffer) -> Result<(PipelineOutput, PipelineOutput)> {
        let restored = self.run_sr(mixture)?;
        let speaker_one = self.run_tse(mixture, &restored.audio)?;
        let speaker_two = self.run_rtse(mixture, &speaker_one.audio)?;
        Ok((speaker_one, speaker_two))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::EncoderConfig;
    use crate::lm::ModelConfig;
    use crate::synth;

    #[test]
    fn twelve_seconds_tiles_into_three_segments() {
        let buf = AudioBuffer::zeros(12 * 16_000);
        let plan = segment(&buf, 5.0).unwrap();
        assert_eq!(
            plan.boundaries,
            vec![(0, 80_000), (80_000, 160_000), (160_000, 192_000)]
        );
    }

    #[test]
    fn exactly_five_seconds_is_one_segment() {
        let buf = AudioBuffer::zeros(80_000);
        let plan = segment(&buf, 5.0).unwrap();
        assert_eq!(plan.boundaries, vec![(0, 80_000)]);
    }

    #[test]
    fn one_extra_sample_yields_one_sample_segment() {
        let buf = AudioBuffer::zeros(80_001);
        let plan = segment(&buf, 5.0).unwrap();
        assert_eq!(plan.boundaries.len(), 2);
        assert_eq!(plan.boundaries[1], (80_000, 80_001));
        // Tiling is exact: no overlap, no gap, covers the input.
        let mut covered = 0;
        for &(s, e) in &plan.boundaries {
            assert_eq!(s, covered);
            covered = e;
        }
        assert_eq!(covered, buf.len());
    }

    fn tiny_pipeline_parts() -> (LmModel, Codec, EncoderStack) {
        let corpus: Vec<AudioBuffer> = synth::toy_corpus(4, 8000, 3)
            .into_iter()
            .map(|u| u.audio)
            .collect();
        let codec = Codec::train(&corpus, 8, 4, 32, 0).unwrap();
        let model = LmModel::new(ModelConfig {
            layers: 1,
            heads: 2,
            hidden: 32,
            ffn_dim: 64,
            max_seq_len: 256,
            k_s: 8,
            k_g: 4,
            init_seed: 1,
        })
        .unwrap();
        let encoder = EncoderStack::new(EncoderConfig {
            d_enc: 32,
            n_layers: 1,
            n_heads: 2,
            d_lm: 32,
            init_seed: 2,
        });
        (model, codec, encoder)
    }

    #[test]
    fn output_length_matches_input_length() {
        let (model, codec, encoder) = tiny_pipeline_parts();
        let mut p = Pipeline::new(&model, &codec, &encoder);
        p.segment_sec = 0.5;
        // 1.3 s input: two full segments plus a 0.3 s remainder.
        let input = synth::utterance(&synth::voice(0), 20_800, 7);
        let out = p.run_sr(&input).unwrap();
        assert_eq!(out.audio.len(), input.len());
        assert_eq!(out.segments.len(), 3);
    }

    #[test]
    fn greedy_pipelines_are_deterministic() {
        let (model, codec, encoder) = tiny_pipeline_parts();
        let mut p = Pipeline::new(&model, &codec, &encoder);
        p.segment_sec = 0.5;
        let mix = synth::utterance(&synth::voice(0), 8000, 9);
        let reference = synth::utterance(&synth::voice(1), 8000, 10);
        let a = p.run_tse(&mix, &reference).unwrap();
        let b = p.run_tse(&mix, &reference).unwrap();
        assert_eq!(a.audio.samples, b.audio.samples);
        let (s1a, s2a) = p.run_ss(&mix).unwrap();
        let (s1b, s2b) = p.run_ss(&mix).unwrap();
        assert_eq!(s1a.audio.samples, s1b.audio.samples);
        assert_eq!(s2a.audio.samples, s2b.audio.samples);
    }

    proptest::proptest! {
        #[test]
        fn segments_tile_exactly(len in 1usize..500_000, seg_ms in 50u32..6000) {
            let buf = AudioBuffer::zeros(len);
            let plan = segment(&buf, f64::from(seg_ms) / 1000.0).unwrap();
            let mut covered = 0usize;
            for &(s, e) in &plan.boundaries {
                proptest::prop_assert_eq!(s, covered);
                proptest::prop_assert!(e > s);
                proptest::prop_assert!(e - s <= plan.segment_len);
                covered = e;
            }
            proptest::prop_assert_eq!(covered, len);
            // All but the last segment are full length.
            for &(s, e) in &plan.boundaries[..plan.boundaries.len() - 1] {
                proptest::prop_assert_eq!(e - s, plan.segment_len);
            }
        }
    }

    #[test]
    fn tse_without_reference_is_rejected_with_stage() {
        let (model, codec, encoder) = tiny_pipeline_parts();
        let p = Pipeline::new(&model, &codec, &encoder);
        let mix = synth::utterance(&synth::voice(0), 8000, 9);
        let msg = p.run_mode(Mode::Tse, &mix, None).unwrap_err().to_string();
        assert!(msg.contains("tse") && msg.contains("reference"), "{msg}");
    }
}
