//! Distortion simulation: additive noise at a requested SNR, reverberation,
//! quantile clipping, bandwidth limitation, packet loss and interfering
//! speakers, plus the probability-driven pipeline that assembles
//! (degraded, target, reference) training triples per operational mode.
//!
//! Application order is fixed: the interfering speaker is mixed first (at the
//! requested SIR), then noise (SNR measured against the speaker mixture),
//! then reverb, clipping, bandlimiting and packet loss. Every random draw
//! comes from the caller-provided RNG in a fixed order, so one seed fully
//! determines the output.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioBuffer;
use crate::dsp;
use crate::error::{Error, Result};
use crate::rng;
use crate::{Mode, SAMPLE_RATE};

/// Distortion probabilities and hyperparameter ranges.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DegradeSpec {
    pub noise_prob: f64,
    pub snr_db_range: (f64, f64),
    pub reverb_prob: f64,
    pub clip_prob: f64,
    pub clip_min_quantile_range: (f64, f64),
    pub clip_max_quantile_range: (f64, f64),
    pub bandlimit_prob: f64,
    pub bandwidth_choices_hz: Vec<u32>,
    pub packet_loss_prob: f64,
    pub packet_loss_rate_range: (f64, f64),
    pub interference_prob_sr: f64,
    pub sir_db_range_sr: (f64, f64),
    pub interference_prob_tse: f64,
    pub sir_db_range_tse: (f64, f64),
    /// Packet duration for the packet-loss distortion.
    pub packet_ms: u32,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        DegradeSpec {
            noise_prob: 0.8,
            snr_db_range: (-5.0, 20.0),
            reverb_prob: 0.3,
            clip_prob: 0.3,
            clip_min_quantile_range: (0.0, 0.1),
            clip_max_quantile_range: (0.9, 1.0),
            bandlimit_prob: 0.3,
            bandwidth_choices_hz: vec![2000, 4000],
            packet_loss_prob: 0.3,
            packet_loss_rate_range: (0.05, 0.25),
            interference_prob_sr: 0.2,
            sir_db_range_sr: (2.0, 20.0),
            interference_prob_tse: 1.0,
            sir_db_range_tse: (-5.0, 5.0),
            packet_ms: 20,
        }
    }
}

impl DegradeSpec {
    /// No distortion ever fires; useful for tests and identity pipelines.
    pub fn all_off() -> Self {
        DegradeSpec {
            noise_prob: 0.0,
            reverb_prob: 0.0,
            clip_prob: 0.0,
            bandlimit_prob: 0.0,
            packet_loss_prob: 0.0,
            interference_prob_sr: 0.0,
            interference_prob_tse: 0.0,
            ..DegradeSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("noise_prob", self.noise_prob),
            ("reverb_prob", self.reverb_prob),
            ("clip_prob", self.clip_prob),
            ("bandlimit_prob", self.bandlimit_prob),
            ("packet_loss_prob", self.packet_loss_prob),
            ("interference_prob_sr", self.interference_prob_sr),
            ("interference_prob_tse", self.interference_prob_tse),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Degrade(format!("{name} = {p} outside [0, 1]")));
            }
        }
        let ranges = [
            ("snr_db_range", self.snr_db_range),
            ("clip_min_quantile_range", self.clip_min_quantile_range),
            ("clip_max_quantile_range", self.clip_max_quantile_range),
            ("packet_loss_rate_range", self.packet_loss_rate_range),
            ("sir_db_range_sr", self.sir_db_range_sr),
            ("sir_db_range_tse", self.sir_db_range_tse),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Degrade(format!("{name} has lower {lo} > upper {hi}")));
            }
        }
        for &bw in &self.bandwidth_choices_hz {
            if bw != 2000 && bw != 4000 {
                return Err(Error::Degrade(format!(
                    "unsupported bandwidth {bw} Hz (expected 2000 or 4000)"
                )));
            }
        }
        if self.packet_ms == 0 {
            return Err(Error::Degrade("packet_ms must be positive".into()));
        }
        Ok(())
    }

    fn interference_prob(&self, mode: Mode) -> f64 {
        match mode {
            Mode::Sr => self.interference_prob_sr,
            Mode::Tse | Mode::Rtse => self.interference_prob_tse,
        }
    }

    fn sir_range(&self, mode: Mode) -> (f64, f64) {
        match mode {
            Mode::Sr => self.sir_db_range_sr,
            Mode::Tse | Mode::Rtse => self.sir_db_range_tse,
        }
    }
}

/// Room impulse response, peak magnitude normalized to 1.
#[derive(Debug, Clone)]
pub struct Rir {
    taps: Vec<f64>,
    peak_index: usize,
}

impl Rir {
    pub fn new(taps: Vec<f64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Degrade("empty impulse response".into()));
        }
        if taps.iter().any(|t| !t.is_finite()) {
            return Err(Error::Degrade("non-finite tap in impulse response".into()));
        }
        let (peak_index, peak) = taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, v)| (i, v.abs()))
            .unwrap();
        if peak == 0.0 {
            return Err(Error::Degrade("all-zero impulse response".into()));
        }
        let taps = taps.iter().map(|t| t / peak).collect();
        Ok(Rir { taps, peak_index })
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Gain applied to `noise` so the clean-to-scaled-noise power ratio hits
/// `snr_db` exactly.
fn snr_gain(clean_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (clean_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `clean + g * noise` with g solving 10*log10(P_clean / P_gnoise) = snr_db.
pub fn mix_at_snr(clean: &AudioBuffer, noise: &AudioBuffer, snr_db: f64) -> Result<AudioBuffer> {
    if clean.len() != noise.len() {
        return Err(Error::Degrade(format!(
            "length mismatch: clean {} vs noise {}",
            clean.len(),
            noise.len()
        )));
    }
    let p_c = clean.power();
    let p_n = noise.power();
    if p_c == 0.0 {
        return Err(Error::Degrade("clean signal has zero power".into()));
    }
    if p_n == 0.0 {
        return Err(Error::Degrade("noise signal has zero power".into()));
    }
    let g = snr_gain(p_c, p_n, snr_db);
    let samples = clean
        .samples
        .iter()
        .zip(&noise.samples)
        .map(|(c, n)| c + g * n)
        .collect();
    Ok(AudioBuffer::new(samples))
}

/// `target + g * interferer` with g solving the SIR equation; same math as
/// [`mix_at_snr`] with interference-speaker naming.
pub fn mix_at_sir(
    target: &AudioBuffer,
    interferer: &AudioBuffer,
    sir_db: f64,
) -> Result<AudioBuffer> {
    if target.len() != interferer.len() {
        return Err(Error::Degrade(format!(
            "length mismatch: target {} vs interferer {}",
            target.len(),
            interferer.len()
        )));
    }
    let p_t = target.power();
    let p_i = interferer.power();
    if p_t == 0.0 {
        return Err(Error::Degrade("target signal has zero power".into()));
    }
    if p_i == 0.0 {
        return Err(Error::Degrade("interferer signal has zero power".into()));
    }
    let g = snr_gain(p_t, p_i, sir_db);
    let samples = target
        .samples
        .iter()
        .zip(&interferer.samples)
        .map(|(t, i)| t + g * i)
        .collect();
    Ok(AudioBuffer::new(samples))
}

/// Convolve with a room impulse response. The RIR's peak tap maps to zero
/// delay, output is truncated to the input length and RMS-renormalized.
pub fn apply_reverb(clean: &AudioBuffer, rir: &Rir) -> Result<AudioBuffer> {
    let full = dsp::fft_convolve(&clean.samples, rir.taps());
    let n = clean.len();
    let start = rir.peak_index;
    let mut out: Vec<f64> = (0..n).map(|i| full.get(start + i).copied().unwrap_or(0.0)).collect();
    let in_rms = clean.rms();
    let out_rms = (out.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    if out_rms == 0.0 {
        return Err(Error::Degrade("reverberated signal has zero power".into()));
    }
    let g = in_rms / out_rms;
    for s in &mut out {
        *s *= g;
    }
    Ok(AudioBuffer::new(out))
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Hard-clamp every sample into the empirical `[min_q, max_q]` quantile range
/// of the buffer's own values.
pub fn clip_quantile(buf: &AudioBuffer, min_q: f64, max_q: f64) -> Result<AudioBuffer> {
    if !(0.0..=1.0).contains(&min_q) || !(0.0..=1.0).contains(&max_q) || min_q >= max_q {
        return Err(Error::Degrade(format!(
            "invalid quantile pair ({min_q}, {max_q}): need 0 <= min < max <= 1"
        )));
    }
    let mut sorted = buf.samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = quantile(&sorted, min_q);
    let hi = quantile(&sorted, max_q);
    let samples = buf.samples.iter().map(|s| s.clamp(lo, hi)).collect();
    Ok(AudioBuffer::new(samples))
}

const FIR_TAPS: usize = 257;

/// Linear-phase FIR low-pass at the given bandwidth, group-delay compensated
/// (edge samples use replicated padding so DC passes exactly).
pub fn bandlimit(buf: &AudioBuffer, bandwidth_hz: u32) -> Result<AudioBuffer> {
    if bandwidth_hz != 2000 && bandwidth_hz != 4000 {
        return Err(Error::Degrade(format!(
            "unsupported bandwidth {bandwidth_hz} Hz (expected 2000 or 4000)"
        )));
    }
    let h = dsp::design_lowpass_fir(f64::from(bandwidth_hz), FIR_TAPS, f64::from(SAMPLE_RATE));
    let n = buf.len();
    let mid = (FIR_TAPS / 2) as isize;
    let x = &buf.samples;
    let ext = |i: isize| -> f64 { x[i.clamp(0, n as isize - 1) as usize] };
    let mut out = vec![0.0f64; n];
    for (t, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (k, &hk) in h.iter().enumerate() {
            acc += hk * ext(t as isize + mid - k as isize);
        }
        *o = acc;
    }
    Ok(AudioBuffer::new(out))
}

/// Zero out contiguous `packet_ms` packets independently with probability
/// `rate`. Returns the degraded buffer and the number of zeroed packets.
pub fn packet_loss(
    buf: &AudioBuffer,
    rate: f64,
    packet_ms: u32,
    rng: &mut ChaCha8Rng,
) -> Result<(AudioBuffer, usize)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Degrade(format!("loss rate {rate} outside [0, 1]")));
    }
    if packet_ms == 0 {
        return Err(Error::Degrade("packet_ms must be positive".into()));
    }
    let packet_len = (packet_ms as usize * SAMPLE_RATE as usize) / 1000;
    let mut out = buf.samples.clone();
    let mut zeroed = 0usize;
    let mut start = 0usize;
    while start < out.len() {
        let end = (start + packet_len).min(out.len());
        if rng.gen_bool(rate) {
            out[start..end].iter_mut().for_each(|s| *s = 0.0);
            zeroed += 1;
        }
        start = end;
    }
    Ok((AudioBuffer::new(out), zeroed))
}

/// One clean utterance plus the identity needed to pick references.
#[derive(Debug, Clone)]
pub struct PoolUtterance {
    pub speaker: String,
    pub utterance_id: String,
    pub audio: AudioBuffer,
}

/// Asset pools consumed by [`simulate`].
#[derive(Debug, Clone, Default)]
pub struct AssetPools {
    pub noises: Vec<AudioBuffer>,
    pub rirs: Vec<Rir>,
    /// Clean utterances grouped implicitly by `speaker`; used for
    /// interferers and reference selection.
    pub speech: Vec<PoolUtterance>,
}

impl AssetPools {
    fn other_speaker_indices(&self, speaker: &str) -> Vec<usize> {
        (0..self.speech.len())
            .filter(|&i| self.speech[i].speaker != speaker)
            .collect()
    }

    fn same_speaker_other_utterance(&self, speaker: &str, exclude_id: &str) -> Vec<usize> {
        (0..self.speech.len())
            .filter(|&i| {
                self.speech[i].speaker == speaker && self.speech[i].utterance_id != exclude_id
            })
            .collect()
    }
}

/// One applied distortion with its sampled hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Applied {
    Interference {
        speaker: String,
        utterance_id: String,
        sir_db: f64,
    },
    Noise {
        snr_db: f64,
        noise_index: usize,
        offset: usize,
    },
    Reverb {
        rir_index: usize,
    },
    Clip {
        min_q: f64,
        max_q: f64,
    },
    Bandlimit {
        bandwidth_hz: u32,
    },
    PacketLoss {
        rate: f64,
        packet_ms: u32,
        zeroed_packets: usize,
    },
}

impl Applied {
    pub fn name(&self) -> &'static str {
        match self {
            Applied::Interference { .. } => "interference",
            Applied::Noise { .. } => "noise",
            Applied::Reverb { .. } => "reverb",
            Applied::Clip { .. } => "clip",
            Applied::Bandlimit { .. } => "bandlimit",
            Applied::PacketLoss { .. } => "packet_loss",
        }
    }

    /// Compact `key=value` form for report files.
    pub fn describe(&self) -> String {
        match self {
            Applied::Interference {
                speaker,
                utterance_id,
                sir_db,
            } => format!("interference(speaker={speaker},utt={utterance_id},sir_db={sir_db})"),
            Applied::Noise {
                snr_db,
                noise_index,
                offset,
            } => format!("noise(snr_db={snr_db},index={noise_index},offset={offset})"),
            Applied::Reverb { rir_index } => format!("reverb(index={rir_index})"),
            Applied::Clip { min_q, max_q } => format!("clip(min_q={min_q},max_q={max_q})"),
            Applied::Bandlimit { bandwidth_hz } => format!("bandlimit(hz={bandwidth_hz})"),
            Applied::PacketLoss {
                rate,
                packet_ms,
                zeroed_packets,
            } => format!("packet_loss(rate={rate},packet_ms={packet_ms},zeroed={zeroed_packets})"),
        }
    }
}

/// Record of one simulation: distortions in application order plus the seed
/// that reproduces them.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradeReport {
    pub applied: Vec<Applied>,
    pub rng_seed: u64,
}

/// Output triple of one simulation.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub degraded: AudioBuffer,
    pub target: AudioBuffer,
    pub reference: Option<AudioBuffer>,
    pub report: DegradeReport,
}

/// Loop (with random circular offset) or randomly crop `src` to `len`
/// samples. Returns the fitted buffer and the chosen offset.
fn fit_to_length(src: &AudioBuffer, len: usize, rng: &mut ChaCha8Rng) -> (AudioBuffer, usize) {
    let n = src.len();
    if n == len {
        return (src.clone(), 0);
    }
    if n > len {
        let offset = rng.gen_range(0..=(n - len));
        (AudioBuffer::new(src.samples[offset..offset + len].to_vec()), offset)
    } else {
        let offset = rng.gen_range(0..n);
        let out = (0..len).map(|i| src.samples[(offset + i) % n]).collect();
        (AudioBuffer::new(out), offset)
    }
}

/// Identity of the clean utterance entering [`simulate`].
#[derive(Debug, Clone, Copy)]
pub struct CleanId<'a> {
    pub speaker: &'a str,
    pub utterance_id: &'a str,
}

/// Run the full distortion pipeline on one clean utterance.
///
/// The target is the clean signal the model must produce: the louder side in
/// SR mode, the reference-matched speaker in TSE mode and the
/// reference-mismatched speaker in rTSE mode. The reference is a different
/// utterance of the target speaker (TSE) or of the interfering speaker
/// (rTSE); SR mode has none.
pub fn simulate(
    clean: &AudioBuffer,
    id: CleanId<'_>,
    pools: &AssetPools,
    mode: Mode,
    spec: &DegradeSpec,
    seed: u64,
) -> Result<SimOutput> {
    spec.validate()?;
    if clean.is_empty() {
        return Err(Error::Degrade("empty clean input".into()));
    }
    let mut r = rng::stream(seed, "simulate", 0);
    let mut applied = Vec::new();

    // Fixed draw order: interference, noise, reverb, clip, bandlimit,
    // packet loss. Hyperparameters are drawn only when a distortion fires.
    let fire_interference = r.gen_bool(spec.interference_prob(mode));
    let fire_noise = r.gen_bool(spec.noise_prob);
    let fire_reverb = r.gen_bool(spec.reverb_prob);
    let fire_clip = r.gen_bool(spec.clip_prob);
    let fire_bandlimit = r.gen_bool(spec.bandlimit_prob);
    let fire_packet_loss = r.gen_bool(spec.packet_loss_prob);

    let mut mixture = clean.clone();
    let mut target = clean.clone();
    let mut interferer_speaker: Option<String> = None;

    if fire_interference {
        let candidates = pools.other_speaker_indices(id.speaker);
        if candidates.is_empty() {
            return Err(Error::Degrade(
                "interference fired but speech pool has no other speaker".into(),
            ));
        }
        let pick = candidates[r.gen_range(0..candidates.len())];
        let utt = &pools.speech[pick];
        let (fitted, _) = fit_to_length(&utt.audio, clean.len(), &mut r);
        let sir_db = uniform(&mut r, spec.sir_range(mode));
        let g = snr_gain(clean.power(), fitted.power().max(f64::MIN_POSITIVE), sir_db);
        let scaled: Vec<f64> = fitted.samples.iter().map(|s| g * s).collect();
        let scaled = AudioBuffer::new(scaled);
        mixture = AudioBuffer::new(
            clean
                .samples
                .iter()
                .zip(&scaled.samples)
                .map(|(c, i)| c + i)
                .collect(),
        );
        if mode == Mode::Sr {
            // Louder speaker wins, at its level in the mixture.
            if scaled.rms() > clean.rms() {
                target = scaled.clone();
            }
        }
        interferer_speaker = Some(utt.speaker.clone());
        applied.push(Applied::Interference {
            speaker: utt.speaker.clone(),
            utterance_id: utt.utterance_id.clone(),
            sir_db,
        });
    }

    // Reference selection is a mode requirement, not a distortion.
    let reference = match mode {
        Mode::Sr => None,
        Mode::Tse => {
            let candidates = pools.same_speaker_other_utterance(id.speaker, id.utterance_id);
            if candidates.is_empty() {
                return Err(Error::Degrade(format!(
                    "tse mode needs another utterance of speaker {:?} in the speech pool",
                    id.speaker
                )));
            }
            let pick = candidates[r.gen_range(0..candidates.len())];
            Some(pools.speech[pick].audio.clone())
        }
        Mode::Rtse => {
            // Reference comes from the interfering speaker; if interference
            // did not fire, any other speaker stands in.
            let candidates = match &interferer_speaker {
                Some(s) => pools.same_speaker_other_utterance(s, ""),
                None => pools.other_speaker_indices(id.speaker),
            };
            let candidates: Vec<usize> = match &interferer_speaker {
                Some(_) => candidates
                    .into_iter()
                    .filter(|&i| {
                        !applied.iter().any(|a| matches!(a, Applied::Interference { utterance_id, .. }
                            if *utterance_id == pools.speech[i].utterance_id))
                    })
                    .collect(),
                None => candidates,
            };
            if candidates.is_empty() {
                return Err(Error::Degrade(
                    "rtse mode needs a second utterance of the interfering speaker".into(),
                ));
            }
            let pick = candidates[r.gen_range(0..candidates.len())];
            Some(pools.speech[pick].audio.clone())
        }
    };

    if fire_noise {
        if pools.noises.is_empty() {
            return Err(Error::Degrade("noise fired but noise pool is empty".into()));
        }
        let noise_index = r.gen_range(0..pools.noises.len());
        let (fitted, offset) = fit_to_length(&pools.noises[noise_index], mixture.len(), &mut r);
        let snr_db = uniform(&mut r, spec.snr_db_range);
        mixture = mix_at_snr(&mixture, &fitted, snr_db)?;
        applied.push(Applied::Noise {
            snr_db,
            noise_index,
            offset,
        });
    }

    if fire_reverb {
        if pools.rirs.is_empty() {
            return Err(Error::Degrade("reverb fired but rir pool is empty".into()));
        }
        let rir_index = r.gen_range(0..pools.rirs.len());
        mixture = apply_reverb(&mixture, &pools.rirs[rir_index])?;
        applied.push(Applied::Reverb { rir_index });
    }

    if fire_clip {
        let min_q = uniform(&mut r, spec.clip_min_quantile_range);
        let max_q = uniform(&mut r, spec.clip_max_quantile_range);
        mixture = clip_quantile(&mixture, min_q, max_q)?;
        applied.push(Applied::Clip { min_q, max_q });
    }

    if fire_bandlimit {
        if spec.bandwidth_choices_hz.is_empty() {
            return Err(Error::Degrade("bandlimit fired but no bandwidth choices".into()));
        }
        let bandwidth_hz =
            spec.bandwidth_choices_hz[r.gen_range(0..spec.bandwidth_choices_hz.len())];
        mixture = bandlimit(&mixture, bandwidth_hz)?;
        applied.push(Applied::Bandlimit { bandwidth_hz });
    }

    if fire_packet_loss {
        let rate = uniform(&mut r, spec.packet_loss_rate_range);
        let (out, zeroed_packets) = packet_loss(&mixture, rate, spec.packet_ms, &mut r)?;
        mixture = out;
        applied.push(Applied::PacketLoss {
            rate,
            packet_ms: spec.packet_ms,
            zeroed_packets,
        });
    }

    debug_assert_eq!(mixture.len(), target.len());
    Ok(SimOutput {
        degraded: mixture,
        target,
        reference,
        report: DegradeReport {
            applied,
            rng_seed: seed,
        },
    })
}
