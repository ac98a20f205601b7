//! Conditional feature extractor: a frozen randomly-initialized encoder (a
//! strided convolution pyramid down to 50 Hz followed by bidirectional
//! self-attention layers) whose per-layer outputs are averaged, then mapped
//! into the sequence-model embedding space by a trainable linear adapter.
//!
//! Only the adapter trains; the rest is initialized from a fixed seed and
//! never touched, which [`freeze_check`] verifies bit-for-bit.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};
use crate::nn;
use crate::rng;
use crate::dsp;

/// Continuous conditioning frames at 50 Hz in the LM embedding dimension.
#[derive(Debug, Clone)]
pub struct CondFeatures {
    pub frames: Array2<f32>,
}

impl CondFeatures {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Feature dimension inside the frozen encoder.
    pub d_enc: usize,
    /// Number of frozen self-attention layers.
    pub n_layers: usize,
    pub n_heads: usize,
    /// LM embedding dimension the adapter maps into.
    pub d_lm: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_enc: 256,
            n_layers: 4,
            n_heads: 4,
            d_lm: 512,
            init_seed: 0x5eed,
        }
    }
}

const CONV_KERNELS: [usize; 4] = [8, 8, 8, 10];
const CONV_STRIDES: [usize; 4] = [4, 4, 4, 5];
const MAX_FRAMES: usize = 4096;

#[derive(Debug, Clone)]
struct ConvLayer {
    /// (c_in * kernel, c_out)
    weight: Array2<f32>,
    bias: Array1<f32>,
    c_in: usize,
    kernel: usize,
    stride: usize,
}

impl ConvLayer {
    fn init(r: &mut ChaCha8Rng, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        ConvLayer {
            weight: nn::init_matrix(r, c_in * kernel, c_out, c_in * kernel),
            bias: Array1::zeros(c_out),
            c_in,
            kernel,
            stride,
        }
    }

    /// `ceil(t_in / stride)` output frames; input right-padded with zeros to
    /// a stride multiple plus kernel overhang.
    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let t_in = x.nrows();
        let t_out = t_in.div_ceil(self.stride);
        let mut cols = Array2::zeros((t_out, self.c_in * self.kernel));
        for t in 0..t_out {
            for j in 0..self.kernel {
                let src = t * self.stride + j;
                if src < t_in {
                    for c in 0..self.c_in {
                        cols[(t, c * self.kernel + j)] = x[(src, c)];
                    }
                }
            }
        }
        let mut out = cols.dot(&self.weight);
        for mut row in out.rows_mut() {
            for (v, b) in row.iter_mut().zip(self.bias.iter()) {
                *v = (*v + b).tanh();
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct AttnLayer {
    norm_attn: Array1<f32>,
    wq: Array2<f32>,
    wk: Array2<f32>,
    wv: Array2<f32>,
    wo: Array2<f32>,
    norm_ffn: Array1<f32>,
    w_gate: Array2<f32>,
    w_up: Array2<f32>,
    w_down: Array2<f32>,
}

impl AttnLayer {
    fn init(r: &mut ChaCha8Rng, d: usize) -> Self {
        let f = 2 * d;
        AttnLayer {
            norm_attn: Array1::ones(d),
            wq: nn::init_matrix(r, d, d, d),
            wk: nn::init_matrix(r, d, d, d),
            wv: nn::init_matrix(r, d, d, d),
            wo: nn::init_matrix(r, d, d, d),
            norm_ffn: Array1::ones(d),
            w_gate: nn::init_matrix(r, d, f, d),
            w_up: nn::init_matrix(r, d, f, d),
            w_down: nn::init_matrix(r, f, d, f),
        }
    }

    /// Bidirectional pre-norm block.
    fn forward(&self, x: &Array2<f32>, n_heads: usize, rope: &nn::RopeTable) -> Array2<f32> {
        let (t, d) = x.dim();
        let hd = d / n_heads;
        let (a, _) = nn::rms_norm(x, &self.norm_attn);
        let mut q = a.dot(&self.wq);
        let mut k = a.dot(&self.wk);
        let v = a.dot(&self.wv);
        nn::rope_all(rope, &mut q, n_heads, 0);
        nn::rope_all(rope, &mut k, n_heads, 0);
        let scale = 1.0 / (hd as f32).sqrt();
        let mut ctx = Array2::<f32>::zeros((t, d));
        let mut scores = vec![0.0f32; t];
        for h in 0..n_heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..t {
                for (jj, s) in scores.iter_mut().enumerate().take(t) {
                    let mut acc = 0.0;
                    for c in cols.clone() {
                        acc += q[(i, c)] * k[(jj, c)];
                    }
                    *s = acc * scale;
                }
                nn::softmax_row(&mut scores, t);
                for c in cols.clone() {
                    let mut acc = 0.0;
                    for (jj, s) in scores.iter().enumerate().take(t) {
                        acc += s * v[(jj, c)];
                    }
                    ctx[(i, c)] = acc;
                }
            }
        }
        let x1 = x + &ctx.dot(&self.wo);
        let (b, _) = nn::rms_norm(&x1, &self.norm_ffn);
        let gate = b.dot(&self.w_gate);
        let up = b.dot(&self.w_up);
        let mut h = gate;
        for (g, u) in h.iter_mut().zip(up.iter()) {
            *g = nn::silu(*g) * u;
        }
        &x1 + &h.dot(&self.w_down)
    }
}

/// Frozen encoder plus trainable adapter.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    conv: Vec<ConvLayer>,
    layers: Vec<AttnLayer>,
    rope: nn::RopeTable,
    /// Trainable: (d_enc, d_lm) map plus bias.
    pub adapter_w: Array2<f32>,
    pub adapter_b: Array1<f32>,
}

impl EncoderStack {
    /// Build and freeze the encoder from its init seed; adapter included.
    pub fn new(config: EncoderConfig) -> Self {
        let mut r = rng::stream(config.init_seed, "encoder_init", 0);
        let mut conv = Vec::new();
        let chans = [1usize, 48, 96, 192, config.d_enc];
        for i in 0..4 {
            conv.push(ConvLayer::init(
                &mut r,
                chans[i],
                chans[i + 1],
                CONV_KERNELS[i],
                CONV_STRIDES[i],
            ));
        }
        let layers = (0..config.n_layers)
            .map(|_| AttnLayer::init(&mut r, config.d_enc))
            .collect();
        let adapter_w = nn::init_matrix(&mut r, config.d_enc, config.d_lm, config.d_enc);
        let adapter_b = Array1::zeros(config.d_lm);
        let rope = nn::RopeTable::new(MAX_FRAMES, config.d_enc / config.n_heads, 10_000.0);
        EncoderStack {
            config,
            conv,
            layers,
            rope,
            adapter_w,
            adapter_b,
        }
    }

    /// Frozen portion: conv pyramid, attention layers, layer averaging and
    /// a final gainless RMS normalization. Output is `(ceil(len/320), d_enc)`.
    pub fn encode_frozen(&self, buf: &AudioBuffer) -> Result<Array2<f32>> {
        if buf.is_empty() {
            return Err(Error::Cond("empty input buffer".into()));
        }
        let mut x = Array2::zeros((buf.len(), 1));
        for (i, &s) in buf.samples.iter().enumerate() {
            x[(i, 0)] = s as f32;
        }
        for (li, layer) in self.conv.iter().enumerate() {
            x = layer.forward(&x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Cond(format!("non-finite activation in conv layer {li}")));
            }
        }
        let mut sum = Array2::<f32>::zeros(x.dim());
        for (li, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x, self.config.n_heads, &self.rope);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Cond(format!(
                    "non-finite activation in attention layer {li}"
                )));
            }
            sum += &x;
        }
        let mut avg = sum / self.layers.len() as f32;
        // Gainless RMS norm bounds the adapter input scale.
        let d = avg.ncols() as f32;
        for mut row in avg.rows_mut() {
            let ms: f32 = row.iter().map(|v| v * v).sum::<f32>() / d;
            let inv = 1.0 / (ms + nn::NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(avg)
    }

    /// Adapter on top of pre-computed frozen features.
    pub fn adapt(&self, frozen: &Array2<f32>) -> CondFeatures {
        let mut frames = frozen.dot(&self.adapter_w);
        for mut row in frames.rows_mut() {
            for (v, b) in row.iter_mut().zip(self.adapter_b.iter()) {
                *v += b;
            }
        }
        CondFeatures { frames }
    }

    /// Full extraction: frozen encoder, layer averaging, adapter.
    pub fn extract(&self, buf: &AudioBuffer) -> Result<CondFeatures> {
        Ok(self.adapt(&self.encode_frozen(buf)?))
    }

    /// Adapter gradient for `d_out` arriving at the adapter output.
    pub fn adapter_grads(frozen: &Array2<f32>, d_out: &Array2<f32>) -> (Array2<f32>, Array1<f32>) {
        let dw = frozen.t().dot(d_out);
        let db = d_out.sum_axis(ndarray::Axis(0));
        (dw, db)
    }

    fn frozen_bits(&self) -> Vec<u32> {
        let mut bits = Vec::new();
        for c in &self.conv {
            bits.extend(c.weight.iter().map(|v| v.to_bits()));
            bits.extend(c.bias.iter().map(|v| v.to_bits()));
        }
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_gate, &l.w_up, &l.w_down] {
                bits.extend(m.iter().map(|v| v.to_bits()));
            }
            bits.extend(l.norm_attn.iter().map(|v| v.to_bits()));
            bits.extend(l.norm_ffn.iter().map(|v| v.to_bits()));
        }
        bits
    }

    fn adapter_bits(&self) -> Vec<u32> {
        let mut bits: Vec<u32> = self.adapter_w.iter().map(|v| v.to_bits()).collect();
        bits.extend(self.adapter_b.iter().map(|v| v.to_bits()));
        bits
    }

    /// Named tensors for checkpointing; `true` marks frozen sections.
    pub fn export_tensors(&self) -> Vec<(String, bool, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, c) in self.conv.iter().enumerate() {
            out.push((
                format!("enc.conv{i}.weight"),
                true,
                vec![c.weight.nrows(), c.weight.ncols()],
                c.weight.iter().copied().collect(),
            ));
            out.push((
                format!("enc.conv{i}.bias"),
                true,
                vec![c.bias.len()],
                c.bias.to_vec(),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let mats: [(&str, &Array2<f32>); 7] = [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("w_gate", &l.w_gate),
                ("w_up", &l.w_up),
                ("w_down", &l.w_down),
            ];
            for (n, m) in mats {
                out.push((
                    format!("enc.attn{i}.{n}"),
                    true,
                    vec![m.nrows(), m.ncols()],
                    m.iter().copied().collect(),
                ));
            }
            out.push((
                format!("enc.attn{i}.norm_attn"),
                true,
                vec![l.norm_attn.len()],
                l.norm_attn.to_vec(),
            ));
            out.push((
                format!("enc.attn{i}.norm_ffn"),
                true,
                vec![l.norm_ffn.len()],
                l.norm_ffn.to_vec(),
            ));
        }
        out.push((
            "enc.adapter.weight".into(),
            false,
            vec![self.adapter_w.nrows(), self.adapter_w.ncols()],
            self.adapter_w.iter().copied().collect(),
        ));
        out.push((
            "enc.adapter.bias".into(),
            false,
            vec![self.adapter_b.len()],
            self.adapter_b.to_vec(),
        ));
        out
    }

    /// Restore tensors exported by [`EncoderStack::export_tensors`].
    pub fn import_tensor(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let fail = |what: &str| Error::Cond(format!("import {name}: {what}"));
        let fill2 = |m: &mut Array2<f32>, data: &[f32]| -> Result<()> {
            if m.len() != data.len() {
                return Err(Error::Cond(format!("import {name}: size mismatch")));
            }
            for (dst, src) in m.iter_mut().zip(data) {
                *dst = *src;
            }
            Ok(())
        };
        let fill1 = |v: &mut Array1<f32>, data: &[f32]| -> Result<()> {
            if v.len() != data.len() {
                return Err(Error::Cond(format!("import {name}: size mismatch")));
            }
            for (dst, src) in v.iter_mut().zip(data) {
                *dst = *src;
            }
            Ok(())
        };
        let rest = name.strip_prefix("enc.").ok_or_else(|| fail("bad prefix"))?;
        if let Some(r) = rest.strip_prefix("conv") {
            let (idx, field) = r.split_once('.').ok_or_else(|| fail("bad name"))?;
            let i: usize = idx.parse().map_err(|_| fail("bad index"))?;
            let c = self.conv.get_mut(i).ok_or_else(|| fail("bad index"))?;
            return match field {
                "weight" => fill2(&mut c.weight, data),
                "bias" => fill1(&mut c.bias, data),
                _ => Err(fail("unknown field")),
            };
        }
        if let Some(r) = rest.strip_prefix("attn") {
            let (idx, field) = r.split_once('.').ok_or_else(|| fail("bad name"))?;
            let i: usize = idx.parse().map_err(|_| fail("bad index"))?;
            let l = self.layers.get_mut(i).ok_or_else(|| fail("bad index"))?;
            return match field {
                "wq" => fill2(&mut l.wq, data),
                "wk" => fill2(&mut l.wk, data),
                "wv" => fill2(&mut l.wv, data),
                "wo" => fill2(&mut l.wo, data),
                "w_gate" => fill2(&mut l.w_gate, data),
                "w_up" => fill2(&mut l.w_up, data),
                "w_down" => fill2(&mut l.w_down, data),
                "norm_attn" => fill1(&mut l.norm_attn, data),
                "norm_ffn" => fill1(&mut l.norm_ffn, data),
                _ => Err(fail("unknown field")),
            };
        }
        match rest {
            "adapter.weight" => fill2(&mut self.adapter_w, data),
            "adapter.bias" => fill1(&mut self.adapter_b, data),
            _ => Err(fail("unknown tensor")),
        }
    }

    /// Utterance-level embedding from the frozen stack (mean and standard
    /// deviation over time), used by the speaker-similarity metric.
    pub fn utterance_embedding(&self, buf: &AudioBuffer) -> Result<Vec<f32>> {
        let frozen = self.encode_frozen(buf)?;
        let frozen64 = frozen.mapv(f64::from);
        let (mean, var) = dsp::row_stats(&frozen64);
        let mut emb: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        emb.extend(var.iter().map(|&v| (v.max(0.0).sqrt()) as f32));
        Ok(emb)
    }
}

/// Bitwise snapshot of the whole stack, split frozen/trainable.
#[derive(Debug, Clone)]
pub struct Snapshot {
    frozen: Vec<u32>,
    adapter: Vec<u32>,
}

pub fn snapshot(stack: &EncoderStack) -> Snapshot {
    Snapshot {
        frozen: stack.frozen_bits(),
        adapter: stack.adapter_bits(),
    }
}

/// True iff every frozen parameter is bit-identical to the snapshot.
pub fn freeze_check(stack: &EncoderStack, snap: &Snapshot) -> bool {
    stack.frozen_bits() == snap.frozen
}

/// True iff the adapter differs from the snapshot (i.e. it trained).
pub fn adapter_changed(stack: &EncoderStack, snap: &Snapshot) -> bool {
    stack.adapter_bits() != snap.adapter
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use crate::HOP;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            d_enc: 32,
            n_layers: 2,
            n_heads: 2,
            d_lm: 48,
            init_seed: 7,
        }
    }

    #[test]
    fn frame_rate_matches_codec_features() {
        let stack = EncoderStack::new(small_config());
        for len in [320usize, 321, 16_000, 16_001, 80_000, 5000] {
            let buf = synth::utterance(&synth::voice(0), len, 3);
            let feats = stack.extract(&buf).unwrap();
            assert_eq!(feats.len(), crate::dsp::frame_count(len, HOP), "len {len}");
            assert_eq!(feats.frames.ncols(), 48);
        }
    }

    #[test]
    fn five_seconds_gives_250_frames() {
        let stack = EncoderStack::new(small_config());
        let buf = synth::utterance(&synth::voice(1), 80_000, 0);
        assert_eq!(stack.extract(&buf).unwrap().len(), 250);
    }

    #[test]
    fn zero_adapter_gives_zero_features() {
        let mut stack = EncoderStack::new(small_config());
        stack.adapter_w.fill(0.0);
        stack.adapter_b.fill(0.0);
        let buf = synth::utterance(&synth::voice(0), 4000, 1);
        let feats = stack.extract(&buf).unwrap();
        assert!(feats.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_linearity_identity() {
        // adapter(a*v) - a*adapter(v) == (1-a) * bias, on the adapter alone.
        let mut stack = EncoderStack::new(small_config());
        stack.adapter_b.fill(0.25);
        let v = Array2::from_shape_fn((3, 32), |(i, j)| ((i + j) as f32 * 0.11).sin());
        let alpha = 1.7f32;
        let lhs = stack.adapt(&v.mapv(|x| alpha * x));
        let rhs = stack.adapt(&v);
        for i in 0..3 {
            for j in 0..48 {
                let diff = lhs.frames[(i, j)] - alpha * rhs.frames[(i, j)];
                assert!((diff - (1.0 - alpha) * 0.25).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let stack = EncoderStack::new(small_config());
        let buf = synth::utterance(&synth::voice(0), 6400, 2);
        let a = stack.extract(&buf).unwrap();
        let b = stack.extract(&buf).unwrap();
        assert_eq!(a.frames, b.frames);
        // Same seed rebuilds the identical stack.
        let stack2 = EncoderStack::new(small_config());
        let c = stack2.extract(&buf).unwrap();
        assert_eq!(a.frames, c.frames);
    }

    #[test]
    fn freeze_check_detects_only_frozen_changes() {
        let mut stack = EncoderStack::new(small_config());
        let snap = snapshot(&stack);
        assert!(freeze_check(&stack, &snap));
        assert!(!adapter_changed(&stack, &snap));
        // Adapter change: freeze check still passes.
        stack.adapter_w[(0, 0)] += 1.0;
        assert!(freeze_check(&stack, &snap));
        assert!(adapter_changed(&stack, &snap));
        // Frozen change: detected.
        stack.layers[0].wq[(1, 1)] += 1e-7;
        assert!(!freeze_check(&stack, &snap));
    }

    #[test]
    fn adapter_gradients_match_finite_differences() {
        // Fixed toy loss L = 0.5 * sum(out^2). Finite differences run on an
        // f64 mirror of the adapter so FD noise stays below the tolerance.
        let stack = EncoderStack::new(small_config());
        let buf = synth::utterance(&synth::voice(0), 3200, 9);
        let frozen = stack.encode_frozen(&buf).unwrap();
        let out = stack.adapt(&frozen).frames;
        let (dw, db) = EncoderStack::adapter_grads(&frozen, &out);

        let frozen64 = frozen.mapv(f64::from);
        let mut w64 = stack.adapter_w.mapv(f64::from);
        let mut b64: Vec<f64> = stack.adapter_b.iter().map(|&v| f64::from(v)).collect();
        let loss = |w: &Array2<f64>, b: &[f64]| -> f64 {
            let mut o = frozen64.dot(w);
            for mut row in o.rows_mut() {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            0.5 * o.iter().map(|v| v * v).sum::<f64>()
        };
        let eps = 1e-5;
        for (i, j) in [(0usize, 0usize), (3, 7), (31, 40)] {
            let orig = w64[(i, j)];
            w64[(i, j)] = orig + eps;
            let up = loss(&w64, &b64);
            w64[(i, j)] = orig - eps;
            let down = loss(&w64, &b64);
            w64[(i, j)] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = f64::from(dw[(i, j)]);
            let rel = (fd - an).abs() / an.abs().max(1e-6);
            assert!(rel < 1e-3, "w[{i},{j}]: fd {fd} vs {an}");
        }
        let orig = b64[5];
        b64[5] = orig + eps;
        let up = loss(&w64, &b64);
        b64[5] = orig - eps;
        let down = loss(&w64, &b64);
        b64[5] = orig;
        let fd = (up - down) / (2.0 * eps);
        let rel = (fd - f64::from(db[5])).abs() / f64::from(db[5]).abs().max(1e-6);
        assert!(rel < 1e-3, "bias: fd {fd} vs {}", db[5]);
    }

    #[test]
    fn export_import_round_trip() {
        let stack = EncoderStack::new(small_config());
        let mut other = EncoderStack::new(EncoderConfig {
            init_seed: 99,
            ..small_config()
        });
        assert!(!freeze_check(&other, &snapshot(&stack)));
        for (name, _, _, data) in stack.export_tensors() {
            other.import_tensor(&name, &data).unwrap();
        }
        assert!(freeze_check(&other, &snapshot(&stack)));
        assert!(!adapter_changed(&other, &snapshot(&stack)));
    }

    #[test]
    fn speaker_embeddings_separate_timbres() {
        let stack = EncoderStack::new(small_config());
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            dot / (na * nb)
        };
        let a0 = stack
            .utterance_embedding(&synth::utterance(&synth::voice(0), 8000, 1))
            .unwrap();
        let a1 = stack
            .utterance_embedding(&synth::utterance(&synth::voice(0), 8000, 2))
            .unwrap();
        let b0 = stack
            .utterance_embedding(&synth::utterance(&synth::voice(1), 8000, 3))
            .unwrap();
        assert!(cos(&a0, &a1) > cos(&a0, &b0));
    }
}
