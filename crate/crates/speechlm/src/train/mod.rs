//! Multi-mode training: per step, sample an operational mode, simulate a
//! degraded triple on the fly, tokenize the target, extract conditions,
//! assemble teacher-forced layouts and take one clipped AdamW step.
//!
//! Every stochastic choice derives from (seed, step, item), so resuming from
//! a checkpoint reproduces an uninterrupted run bit-for-bit.

pub mod checkpoint;
pub mod optim;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::audio::AudioBuffer;
use crate::codec::Codec;
use crate::cond::{CondFeatures, EncoderStack};
use crate::degrade::{simulate, AssetPools, CleanId, DegradeSpec, PoolUtterance, Rir};
use crate::error::{Error, Result};
use crate::lm::{self, LmGrads, LmModel, SequenceLayout};
use crate::rng;
use crate::{Mode, SAMPLE_RATE};

pub use optim::{clip_global_norm, lr_schedule, AdamW};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub epoch_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Probabilities over (SR, TSE, rTSE); must sum to 1.
    pub mode_mix: [f64; 3],
    pub seed: u64,
    pub grad_clip: f64,
    /// Training segment length in seconds (crop or zero-pad).
    pub segment_sec: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            peak_lr: 0.001,
            warmup_steps: 4000,
            epoch_decay: 0.98,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            batch_size: 4,
            mode_mix: [1.0 / 3.0; 3],
            seed: 0,
            grad_clip: 1.0,
            segment_sec: 5.0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mode_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Train(format!("mode_mix sums to {sum}, expected 1")));
        }
        if self.mode_mix.iter().any(|&p| p < 0.0) {
            return Err(Error::Train("mode_mix has a negative entry".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Train("batch_size must be positive".into()));
        }
        if self.segment_sec <= 0.0 {
            return Err(Error::Train("segment_sec must be positive".into()));
        }
        Ok(())
    }

    pub fn segment_samples(&self) -> usize {
        (self.segment_sec * f64::from(SAMPLE_RATE)).round() as usize
    }
}

/// Mutable training state: everything a checkpoint persists.
pub struct TrainState {
    pub model: LmModel,
    pub encoder: EncoderStack,
    pub opt: AdamW,
    pub step: u64,
    pub epoch: u32,
    pub rejected_steps: u64,
    pub config: TrainConfig,
}

/// In-memory training corpus.
pub struct TrainData {
    pub speech: Vec<PoolUtterance>,
    pub noises: Vec<AudioBuffer>,
    pub rirs: Vec<Rir>,
}

/// One fully prepared batch element.
pub struct PreparedItem {
    pub layout: SequenceLayout,
    /// Frozen-encoder output for the degraded conditions (adapter input).
    pub frozen_d: Array2<f32>,
    pub frozen_r: Option<Array2<f32>>,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub step: u64,
    pub epoch: u32,
    pub mode: Mode,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// False when the step was rejected (non-finite loss) and no update ran.
    pub applied: bool,
}

pub struct Trainer {
    pub state: TrainState,
    pub codec: Codec,
    pub spec: DegradeSpec,
    pub data: TrainData,
}

impl Trainer {
    pub fn new(
        model: LmModel,
        encoder: EncoderStack,
        codec: Codec,
        spec: DegradeSpec,
        data: TrainData,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if encoder.config.d_lm != model.config.hidden {
            return Err(Error::Train(format!(
                "adapter output dim {} does not match model hidden {}",
                encoder.config.d_lm, model.config.hidden
            )));
        }
        if codec.k_s() != model.config.k_s || codec.k_g() != model.config.k_g {
            return Err(Error::Train(format!(
                "codec sizes ({}, {}) do not match model vocabulary ({}, {})",
                codec.k_s(),
                codec.k_g(),
                model.config.k_s,
                model.config.k_g
            )));
        }
        if data.speech.is_empty() {
            return Err(Error::Train("empty speech pool".into()));
        }
        let opt = AdamW::new(&config);
        Ok(Trainer {
            state: TrainState {
                model,
                encoder,
                opt,
                step: 0,
                epoch: 0,
                rejected_steps: 0,
                config,
            },
            codec,
            spec,
            data,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.data.speech.len() as u64).div_ceil(self.state.config.batch_size as u64)
    }

    /// Mode drawn for a given step from the configured mix.
    pub fn sample_mode(config: &TrainConfig, step: u64) -> Mode {
        let mut r = rng::stream(config.seed, "mode", step);
        let x: f64 = r.gen_range(0.0..1.0);
        if x < config.mode_mix[0] {
            Mode::Sr
        } else if x < config.mode_mix[0] + config.mode_mix[1] {
            Mode::Tse
        } else {
            Mode::Rtse
        }
    }

    /// Deterministic shuffle for an epoch; `wrap` > 0 selects the reshuffle
    /// used when a batch exhausts the data mid-epoch.
    fn epoch_order(&self, epoch: u32, wrap: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.data.speech.len()).collect();
        let tag = (u64::from(epoch) << 20) | wrap;
        let mut r = rng::stream(self.state.config.seed, "epoch_shuffle", tag);
        // Fisher-Yates.
        for i in (1..order.len()).rev() {
            let j = r.gen_range(0..=i);
            order.swap(i, j);
        }
        order
    }

    /// Crop (seeded window) or zero-pad to the training segment length.
    fn fit_segment(
        buf: &AudioBuffer,
        samples: usize,
        r: &mut rand_chacha::ChaCha8Rng,
    ) -> AudioBuffer {
        if buf.len() > samples {
            let start = r.gen_range(0..=(buf.len() - samples));
            AudioBuffer::new(buf.samples[start..start + samples].to_vec())
        } else {
            buf.fit_length(samples)
        }
    }

    /// Simulate, tokenize and lay out one training example.
    pub fn prepare_item(
        &self,
        utt_index: usize,
        mode: Mode,
        step: u64,
        slot: usize,
    ) -> Result<PreparedItem> {
        let cfg = &self.state.config;
        let seg = cfg.segment_samples();
        let utt = &self.data.speech[utt_index];
        let item_tag = step * cfg.batch_size as u64 + slot as u64;
        let mut r = rng::stream(cfg.seed, "prepare", item_tag);
        let clean = Self::fit_segment(&utt.audio, seg, &mut r);
        let pools = AssetPools {
            noises: self.data.noises.clone(),
            rirs: self.data.rirs.clone(),
            speech: self.data.speech.clone(),
        };
        let sim = simulate(
            &clean,
            CleanId {
                speaker: &utt.speaker,
                utterance_id: &utt.utterance_id,
            },
            &pools,
            mode,
            &self.spec,
            rng::derive_seed(cfg.seed, "simulate", item_tag),
        )?;
        let (g, s) = self.codec.encode(&sim.target)?;
        let frozen_d = self.state.encoder.encode_frozen(&sim.degraded)?;
        let cond_d = self.state.encoder.adapt(&frozen_d);
        let (frozen_r, cond_r): (Option<Array2<f32>>, Option<CondFeatures>) = match sim.reference {
            Some(reference) => {
                let fitted = Self::fit_segment(&reference, seg, &mut r);
                let frozen = self.state.encoder.encode_frozen(&fitted)?;
                let cond = self.state.encoder.adapt(&frozen);
                (Some(frozen), Some(cond))
            }
            None => (None, None),
        };
        let layout = lm::training_layout(
            &self.state.model.config.vocab(),
            mode,
            cond_d,
            cond_r,
            &g,
            &s,
        )?;
        Ok(PreparedItem {
            layout,
            frozen_d,
            frozen_r,
        })
    }

    /// Prepare the batch for a given global step.
    pub fn prepare_batch(&self, step: u64) -> Result<(Mode, Vec<PreparedItem>)> {
        let cfg = &self.state.config;
        let mode = Self::sample_mode(cfg, step);
        let spe = self.steps_per_epoch();
        let epoch = (step / spe) as u32;
        let order = self.epoch_order(epoch, 0);
        let pos0 = (step % spe) as usize * cfg.batch_size;
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|j| {
                let pos = pos0 + j;
                let wrap = (pos / order.len()) as u64;
                if wrap == 0 {
                    order[pos]
                } else {
                    // Exhausted mid-epoch: wrap onto a fresh shuffle.
                    self.epoch_order(epoch, wrap)[pos % order.len()]
                }
            })
            .collect();
        let items: Vec<Result<PreparedItem>> = indices
            .par_iter()
            .enumerate()
            .map(|(j, &utt)| self.prepare_item(utt, mode, step, j))
            .collect();
        let mut batch = Vec::with_capacity(items.len());
        for item in items {
            batch.push(item?);
        }
        Ok((mode, batch))
    }

    /// One optimization step over a prepared batch. Only the model and
    /// adapter update; the frozen encoder is untouched. A non-finite loss
    /// rejects the step and leaves all state except counters unchanged.
    pub fn train_step(&mut self, mode: Mode, batch: &[PreparedItem]) -> Result<StepOutcome> {
        if batch.is_empty() {
            return Err(Error::Train("empty batch".into()));
        }
        let cfg = self.state.config.clone();
        let spe = self.steps_per_epoch();
        let epoch = (self.state.step / spe) as u32;
        self.state.epoch = epoch;
        let lr = lr_schedule(self.state.step, epoch, &cfg);
        let model = &self.state.model;

        // Forward all items first to fix the masked-position total.
        type FwdOut = (lm::model::ForwardPass, f64, usize, f64);
        let forwards: Vec<Result<FwdOut>> = batch
            .par_iter()
            .map(|item| {
                let x = model.embed_layout(&item.layout)?;
                let fwd = model.forward(x)?;
                let (nll, count) =
                    lm::nll_sum(&fwd.logits, &item.layout.labels, &item.layout.mask)?;
                let acc = lm::masked_accuracy(&fwd.logits, &item.layout.labels, &item.layout.mask);
                Ok((fwd, nll, count, acc))
            })
            .collect();

        let mut total_nll = 0.0f64;
        let mut total_count = 0usize;
        let mut acc_sum = 0.0f64;
        let mut oks = Vec::with_capacity(batch.len());
        let mut reject = false;
        for f in forwards {
            match f {
                Ok((fwd, nll, count, acc)) => {
                    if !nll.is_finite() {
                        reject = true;
                    }
                    total_nll += nll;
                    total_count += count;
                    acc_sum += acc * count as f64;
                    oks.push(fwd);
                }
                Err(Error::Lm(msg)) if msg.contains("non-finite") => {
                    reject = true;
                    oks.clear();
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let loss = total_nll / total_count.max(1) as f64;

        if reject || !loss.is_finite() {
            self.state.rejected_steps += 1;
            let out = StepOutcome {
                step: self.state.step,
                epoch,
                mode,
                loss: f64::NAN,
                accuracy: 0.0,
                grad_norm: 0.0,
                lr,
                applied: false,
            };
            self.state.step += 1;
            return Ok(out);
        }

        // Backward per item, merged in index order.
        let inv_total = 1.0 / total_count as f32;
        let per_item: Vec<(LmGrads, Array2<f32>, Option<Array2<f32>>)> = batch
            .par_iter()
            .zip(oks.par_iter())
            .map(|(item, fwd)| {
                let dl =
                    lm::dlogits(&fwd.logits, &item.layout.labels, &item.layout.mask, inv_total);
                let mut grads = LmGrads::zeros(&model.config);
                let dx = model.backward(fwd, &dl, &mut grads);
                let (d_cond_d, d_cond_r) = model.scatter_input_grads(&item.layout, &dx, &mut grads);
                (grads, d_cond_d, d_cond_r)
            })
            .collect();

        let mut grads = LmGrads::zeros(&model.config);
        let mut d_adapter_w = Array2::<f32>::zeros(self.state.encoder.adapter_w.dim());
        let mut d_adapter_b = ndarray::Array1::<f32>::zeros(self.state.encoder.adapter_b.len());
        for (item, (g, d_cond_d, d_cond_r)) in batch.iter().zip(per_item.iter()) {
            grads.merge(g);
            let (dw, db) = EncoderStack::adapter_grads(&item.frozen_d, d_cond_d);
            d_adapter_w += &dw;
            d_adapter_b += &db;
            if let (Some(frozen_r), Some(d_r)) = (&item.frozen_r, d_cond_r) {
                let (dw, db) = EncoderStack::adapter_grads(frozen_r, d_r);
                d_adapter_w += &dw;
                d_adapter_b += &db;
            }
        }

        // Gather named gradients in canonical order, clip jointly.
        let mut named: Vec<(String, Vec<f32>)> = Vec::new();
        grads.visit_mut(&mut |name, g| named.push((name.to_string(), g.to_vec())));
        named.push((
            "enc.adapter.weight".into(),
            d_adapter_w.iter().copied().collect(),
        ));
        named.push(("enc.adapter.bias".into(), d_adapter_b.to_vec()));
        let grad_norm = clip_global_norm(&mut named, cfg.grad_clip);

        let gmap: std::collections::HashMap<String, Vec<f32>> = named.into_iter().collect();
        self.state.opt.begin_step();
        let opt = &mut self.state.opt;
        self.state.model.visit_mut(&mut |name, p| {
            opt.update(name, lr, p, &gmap[name]);
        });
        opt.update(
            "enc.adapter.weight",
            lr,
            self.state.encoder.adapter_w.as_slice_mut().unwrap(),
            &gmap["enc.adapter.weight"],
        );
        opt.update(
            "enc.adapter.bias",
            lr,
            self.state.encoder.adapter_b.as_slice_mut().unwrap(),
            &gmap["enc.adapter.bias"],
        );

        let out = StepOutcome {
            step: self.state.step,
            epoch,
            mode,
            loss,
            accuracy: acc_sum / total_count as f64,
            grad_norm,
            lr,
            applied: true,
        };
        self.state.step += 1;
        Ok(out)
    }

    /// Verify in-loop that prefix labels cannot leak into the loss: scramble
    /// labels at unmasked positions and require a bit-identical loss.
    pub fn verify_loss_mask(&self, item: &PreparedItem) -> Result<bool> {
        let x = self.state.model.embed_layout(&item.layout)?;
        let fwd = self.state.model.forward(x)?;
        let base = lm::nll_mean(&fwd.logits, &item.layout.labels, &item.layout.mask)?;
        let mut scrambled = item.layout.labels.clone();
        for (l, &m) in scrambled.iter_mut().zip(&item.layout.mask) {
            if !m {
                *l = Some(0);
            }
        }
        let canary = lm::nll_mean(&fwd.logits, &scrambled, &item.layout.mask)?;
        Ok(base == canary)
    }

    /// Run until `max_steps` (when given) or `config.epochs` worth of steps.
    /// The callback sees each step outcome plus the current state, e.g. for
    /// periodic checkpointing.
    pub fn run(
        &mut self,
        max_steps: Option<u64>,
        mut on_step: impl FnMut(&StepOutcome, &TrainState),
    ) -> Result<()> {
        let total =
            max_steps.unwrap_or(self.steps_per_epoch() * u64::from(self.state.config.epochs));
        let mut canary_checked = false;
        while self.state.step < total {
            let (mode, batch) = self.prepare_batch(self.state.step)?;
            if !canary_checked {
                if !self.verify_loss_mask(&batch[0])? {
                    return Err(Error::Train("loss-mask canary failed".into()));
                }
                canary_checked = true;
            }
            let outcome = self.train_step(mode, &batch)?;
            on_step(&outcome, &self.state);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cond::EncoderConfig;
    use crate::lm::ModelConfig;
    use crate::synth;

    fn tiny_setup(seed: u64) -> Trainer {
        let corpus = synth::toy_corpus(6, 6400, 1);
        let bufs: Vec<AudioBuffer> = corpus.iter().map(|u| u.audio.clone()).collect();
        let codec = Codec::train(&bufs, 8, 4, 32, 0).unwrap();
        let model_cfg = ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 32,
            ffn_dim: 64,
            max_seq_len: 256,
            k_s: 8,
            k_g: 4,
            init_seed: 3,
        };
        let enc_cfg = EncoderConfig {
            d_enc: 32,
            n_layers: 1,
            n_heads: 2,
            d_lm: 32,
            init_seed: 4,
        };
        let data = TrainData {
            speech: corpus
                .into_iter()
                .map(|u| PoolUtterance {
                    speaker: u.speaker,
                    utterance_id: u.utterance_id,
                    audio: u.audio,
                })
                .collect(),
            noises: vec![synth::noise(4000, 9)],
            rirs: vec![crate::degrade::Rir::new(synth::rir_taps(64, 2)).unwrap()],
        };
        let config = TrainConfig {
            batch_size: 2,
            segment_sec: 0.4,
            warmup_steps: 10,
            seed,
            ..TrainConfig::default()
        };
        Trainer::new(
            LmModel::new(model_cfg).unwrap(),
            EncoderStack::new(enc_cfg),
            codec,
            DegradeSpec {
                reverb_prob: 0.1,
                bandlimit_prob: 0.1,
                ..DegradeSpec::default()
            },
            data,
            config,
        )
        .unwrap()
    }

    #[test]
    fn mode_mix_all_sr_yields_only_sr_layouts() {
        let mut t = tiny_setup(0);
        t.state.config.mode_mix = [1.0, 0.0, 0.0];
        for step in 0..20 {
            assert_eq!(Trainer::sample_mode(&t.state.config, step), Mode::Sr);
        }
        let (mode, batch) = t.prepare_batch(0).unwrap();
        assert_eq!(mode, Mode::Sr);
        assert!(batch.iter().all(|b| b.layout.mode == Mode::Sr));
        let _ = &mut t;
    }

    #[test]
    fn uniform_mode_mix_frequencies() {
        let cfg = TrainConfig {
            seed: 77,
            ..TrainConfig::default()
        };
        let mut counts = [0usize; 3];
        let n = 3000;
        for step in 0..n {
            match Trainer::sample_mode(&cfg, step) {
                Mode::Sr => counts[0] += 1,
                Mode::Tse => counts[1] += 1,
                Mode::Rtse => counts[2] += 1,
            }
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "frequency {f}");
        }
    }

    #[test]
    fn zero_lr_keeps_params_bit_identical() {
        let mut t = tiny_setup(1);
        t.state.config.peak_lr = 0.0;
        let before = crate::cond::snapshot(&t.state.encoder);
        let mut model_bits: Vec<u32> = Vec::new();
        t.state.model.visit_mut(&mut |_, p| {
            model_bits.extend(p.iter().map(|v| v.to_bits()));
        });
        let (mode, batch) = t.prepare_batch(0).unwrap();
        let out = t.train_step(mode, &batch).unwrap();
        assert!(out.applied);
        let mut after_bits: Vec<u32> = Vec::new();
        t.state.model.visit_mut(&mut |_, p| {
            after_bits.extend(p.iter().map(|v| v.to_bits()));
        });
        assert_eq!(model_bits, after_bits);
        assert!(!crate::cond::adapter_changed(&t.state.encoder, &before));
    }

    #[test]
    fn frozen_encoder_never_trains() {
        let mut t = tiny_setup(2);
        let snap = crate::cond::snapshot(&t.state.encoder);
        for step in 0..3 {
            let (mode, batch) = t.prepare_batch(step).unwrap();
            t.train_step(mode, &batch).unwrap();
        }
        assert!(crate::cond::freeze_check(&t.state.encoder, &snap));
        // The adapter, in contrast, must have moved.
        assert!(crate::cond::adapter_changed(&t.state.encoder, &snap));
    }

    #[test]
    fn repeated_batch_overfits() {
        let mut t = tiny_setup(3);
        t.state.config.warmup_steps = 50;
        let (mode, batch) = t.prepare_batch(0).unwrap();
        let first = t.train_step(mode, &batch).unwrap();
        let mut last = first.loss;
        for _ in 0..499 {
            last = t.train_step(mode, &batch).unwrap().loss;
        }
        assert!(
            last < 0.1 * first.loss,
            "loss went {} -> {last}, not below 10%",
            first.loss
        );
    }

    #[test]
    fn non_finite_loss_rejects_step() {
        let mut t = tiny_setup(4);
        let (mode, mut batch) = t.prepare_batch(0).unwrap();
        batch[0].layout.cond_d.frames[(0, 0)] = f32::NAN;
        let mut before: Vec<u32> = Vec::new();
        t.state
            .model
            .visit_mut(&mut |_, p| before.extend(p.iter().map(|v| v.to_bits())));
        let out = t.train_step(mode, &batch).unwrap();
        assert!(!out.applied);
        assert_eq!(t.state.rejected_steps, 1);
        let mut after: Vec<u32> = Vec::new();
        t.state
            .model
            .visit_mut(&mut |_, p| after.extend(p.iter().map(|v| v.to_bits())));
        assert_eq!(before, after);
        // Training continues from the prior state.
        let (mode2, batch2) = t.prepare_batch(t.state.step).unwrap();
        let out2 = t.train_step(mode2, &batch2).unwrap();
        assert!(out2.applied);
    }

    #[test]
    fn loss_mask_canary_holds_in_loop() {
        let t = tiny_setup(5);
        let (_, batch) = t.prepare_batch(0).unwrap();
        assert!(t.verify_loss_mask(&batch[0]).unwrap());
    }

    #[test]
    fn resume_from_checkpoint_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("state.ckpt");

        // Uninterrupted: 6 steps.
        let mut a = tiny_setup(6);
        let mut losses_a = Vec::new();
        a.run(Some(6), |o, _| losses_a.push(o.loss)).unwrap();

        // Interrupted: 3 steps, save, reload, 3 more.
        let mut b = tiny_setup(6);
        let mut losses_b = Vec::new();
        b.run(Some(3), |o, _| losses_b.push(o.loss)).unwrap();
        checkpoint::save(&ckpt, &b.state, "codec_hash", "config_hash").unwrap();
        let loaded = checkpoint::load(&ckpt).unwrap();
        assert_eq!(loaded.step, 3);
        assert_eq!(loaded.codec_hash, "codec_hash");
        let mut c = tiny_setup(6);
        c.state.model = loaded.model;
        c.state.encoder = loaded.encoder;
        c.state.opt = loaded.opt;
        c.state.step = loaded.step;
        c.state.epoch = loaded.epoch;
        c.state.rejected_steps = loaded.rejected_steps;
        c.state.config = loaded.train_config;
        c.run(Some(6), |o, _| losses_b.push(o.loss)).unwrap();

        assert_eq!(losses_a.len(), losses_b.len());
        for (x, y) in losses_a.iter().zip(&losses_b) {
            assert_eq!(x, y, "losses diverged: {losses_a:?} vs {losses_b:?}");
        }
        // Final parameters bit-identical too.
        let mut bits_a: Vec<u32> = Vec::new();
        a.state
            .model
            .visit_mut(&mut |_, p| bits_a.extend(p.iter().map(|v| v.to_bits())));
        let mut bits_c: Vec<u32> = Vec::new();
        c.state
            .model
            .visit_mut(&mut |_, p| bits_c.extend(p.iter().map(|v| v.to_bits())));
        assert_eq!(bits_a, bits_c);
    }
}
