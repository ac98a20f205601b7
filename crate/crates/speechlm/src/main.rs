//! Command-line entry point: corpus synthesis, degradation, codec training,
//! model training, inference and evaluation, all driven by one TOML config
//! whose hash is stamped into every artifact.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use speechlm::audio::{read_wav, write_wav, AudioBuffer};
use speechlm::codec::{self, Codec};
use speechlm::cond::EncoderStack;
use speechlm::config::{self, config_hash, file_sha256, RunConfig};
use speechlm::degrade::{simulate, AssetPools, CleanId, PoolUtterance, Rir};
use speechlm::error::{Error, Result};
use speechlm::eval::{log_spectral_distance, si_sdr, speaker_sim, MetricReport, MetricRow};
use speechlm::lm::{LmModel, Sampler};
use speechlm::manifest::{self, Entry, Kind, Manifest};
use speechlm::orchestrate::Pipeline;
use speechlm::rng;
use speechlm::train::{checkpoint, TrainData, Trainer};
use speechlm::{synth, Mode};

#[derive(Parser)]
#[command(name = "speechlm", version, about = "Token-LM speech enhancement toolkit")]
struct Cli {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (0 = all cores). Overrides config and SPEECHLM_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sr,
    Tse,
    Rtse,
    Ss,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Greedy,
    TopK,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic toy corpus with a manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Clean utterances (split over the voice presets).
        #[arg(long, default_value_t = 8)]
        utterances: usize,
        #[arg(long, default_value_t = 1.0)]
        duration_sec: f64,
        #[arg(long, default_value_t = 2)]
        noises: usize,
        #[arg(long, default_value_t = 2)]
        rirs: usize,
    },
    /// Simulate degraded/target/reference triples from a manifest.
    Degrade {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out_dir: PathBuf,
        /// Process only the first N clean utterances.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fit the discrete codec on the clean utterances of a manifest.
    TrainCodec {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the sequence model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many optimization steps (default: full epochs).
        #[arg(long)]
        max_steps: Option<u64>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run inference: sr, tse, rtse, or the chained ss separation.
    Infer {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        input: PathBuf,
        /// Reference audio (required for tse/rtse).
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 20)]
        top_k: usize,
        #[arg(long, default_value_t = 0.8)]
        temperature: f32,
        /// Accept mismatched codec/model hashes.
        #[arg(long)]
        force: bool,
    },
    /// Compute proxy metrics over paired reference/estimate manifests.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        /// Model checkpoint supplying the speaker-similarity encoder and
        /// the expected artifact hashes.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accept mismatched artifact hashes.
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => config::load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
        cfg.codec.train_seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    } else if let Ok(env_threads) = std::env::var("SPEECHLM_THREADS") {
        if let Ok(n) = env_threads.parse() {
            cfg.threads = n;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(cfg: &RunConfig) {
    if cfg.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_run_config(&cli)?;
    init_threads(&cfg);
    let hash = config_hash(&cfg);
    println!("config_hash={hash} seed={}", cfg.seed);
    match cli.command {
        Command::Synth {
            out_dir,
            utterances,
            duration_sec,
            noises,
            rirs,
        } => cmd_synth(&cfg, &hash, &out_dir, utterances, duration_sec, noises, rirs),
        Command::Degrade {
            manifest,
            mode,
            out_dir,
            count,
        } => cmd_degrade(&cfg, &hash, &manifest, mode, &out_dir, count),
        Command::TrainCodec { manifest, out } => cmd_train_codec(&cfg, &hash, &manifest, &out),
        Command::Train {
            manifest,
            codec,
            out,
            max_steps,
            resume,
        } => cmd_train(&cfg, &hash, &manifest, &codec, &out, max_steps, resume),
        Command::Infer {
            mode,
            input,
            reference,
            output,
            model,
            codec,
            sampler,
            top_k,
            temperature,
            force,
        } => {
            let sampler = match sampler {
                SamplerArg::Greedy => Sampler::Greedy,
                SamplerArg::TopK => Sampler::TopK {
                    k: top_k,
                    temperature,
                },
            };
            cmd_infer(
                &cfg, &hash, mode, &input, reference.as_deref(), &output, &model, &codec, sampler,
                force,
            )
        }
        Command::Eval {
            reference,
            estimate,
            model,
            out,
            force,
        } => cmd_eval(&cfg, &hash, &reference, &estimate, model.as_deref(), out.as_deref(), force),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(
    cfg: &RunConfig,
    hash: &str,
    out_dir: &Path,
    utterances: usize,
    duration_sec: f64,
    noises: usize,
    rirs: usize,
) -> Result<()> {
    ensure_dir(out_dir)?;
    let len = (duration_sec * 16_000.0).round() as usize;
    let mut entries = Vec::new();
    for u in synth::toy_corpus(utterances, len, cfg.seed) {
        let file = format!("{}.wav", u.utterance_id);
        write_wav(&u.audio, out_dir.join(&file))?;
        entries.push(Entry {
            utterance_id: u.utterance_id,
            path: PathBuf::from(&file),
            kind: Kind::Clean,
            duration_sec,
        });
    }
    for i in 0..noises {
        let buf = synth::noise(len * 2, rng::derive_seed(cfg.seed, "cli_noise", i as u64));
        let file = format!("noise_{i}.wav");
        write_wav(&buf, out_dir.join(&file))?;
        entries.push(Entry {
            utterance_id: format!("noise_{i}"),
            path: PathBuf::from(&file),
            kind: Kind::Noise,
            duration_sec: duration_sec * 2.0,
        });
    }
    for i in 0..rirs {
        let taps = synth::rir_taps(800, rng::derive_seed(cfg.seed, "cli_rir", i as u64));
        let buf = AudioBuffer::new(taps);
        let file = format!("rir_{i}.wav");
        write_wav(&buf, out_dir.join(&file))?;
        entries.push(Entry {
            utterance_id: format!("rir_{i}"),
            path: PathBuf::from(&file),
            kind: Kind::Rir,
            duration_sec: 800.0 / 16_000.0,
        });
    }
    let manifest = Manifest { entries };
    let mpath = out_dir.join("manifest.tsv");
    manifest::write_manifest(&manifest, &mpath)?;
    config::write_meta(
        out_dir.join("manifest.tsv.meta"),
        &[("config_hash", hash.into()), ("seed", cfg.seed.to_string())],
    )?;
    println!("wrote {} entries to {}", manifest.entries.len(), mpath.display());
    Ok(())
}

/// Load every manifest entry into memory, splitting by kind.
fn load_pools(manifest_path: &Path) -> Result<(Vec<PoolUtterance>, Vec<AudioBuffer>, Vec<Rir>)> {
    let m = manifest::load_manifest(manifest_path)?;
    let mut speech = Vec::new();
    let mut noises = Vec::new();
    let mut rirs = Vec::new();
    for e in &m.entries {
        let buf = read_wav(&e.path)?;
        match e.kind {
            Kind::Clean => speech.push(PoolUtterance {
                speaker: e.speaker().to_string(),
                utterance_id: e.utterance_id.clone(),
                audio: buf,
            }),
            Kind::Noise => noises.push(buf),
            Kind::Rir => rirs.push(Rir::new(buf.samples)?),
        }
    }
    Ok((speech, noises, rirs))
}

fn mode_of(arg: ModeArg) -> Option<Mode> {
    match arg {
        ModeArg::Sr => Some(Mode::Sr),
        ModeArg::Tse => Some(Mode::Tse),
        ModeArg::Rtse => Some(Mode::Rtse),
        ModeArg::Ss => None,
    }
}

fn cmd_degrade(
    cfg: &RunConfig,
    hash: &str,
    manifest_path: &Path,
    mode: ModeArg,
    out_dir: &Path,
    count: Option<usize>,
) -> Result<()> {
    let mode = mode_of(mode).ok_or_else(|| {
        Error::Degrade("ss is an inference mode; degrade takes sr, tse or rtse".into())
    })?;
    ensure_dir(out_dir)?;
    let (speech, noises, rirs) = load_pools(manifest_path)?;
    let pools = AssetPools {
        noises,
        rirs,
        speech: speech.clone(),
    };
    let n = count.unwrap_or(speech.len()).min(speech.len());
    let mut report_lines = String::new();
    let mut degraded_entries = Vec::new();
    let mut target_entries = Vec::new();
    for (i, utt) in speech.iter().take(n).enumerate() {
        let seed = rng::derive_seed(cfg.seed, "cli_degrade", i as u64);
        let sim = simulate(
            &utt.audio,
            CleanId {
                speaker: &utt.speaker,
                utterance_id: &utt.utterance_id,
            },
            &pools,
            mode,
            &cfg.degrade,
            seed,
        )?;
        let id = &utt.utterance_id;
        let dur = sim.degraded.duration_sec();
        let dfile = format!("{id}.degraded.wav");
        let tfile = format!("{id}.target.wav");
        write_wav(&sim.degraded, out_dir.join(&dfile))?;
        write_wav(&sim.target, out_dir.join(&tfile))?;
        degraded_entries.push(Entry {
            utterance_id: id.clone(),
            path: PathBuf::from(&dfile),
            kind: Kind::Clean,
            duration_sec: dur,
        });
        target_entries.push(Entry {
            utterance_id: id.clone(),
            path: PathBuf::from(&tfile),
            kind: Kind::Clean,
            duration_sec: dur,
        });
        if let Some(reference) = &sim.reference {
            write_wav(reference, out_dir.join(format!("{id}.reference.wav")))?;
        }
        let applied: Vec<String> = sim.report.applied.iter().map(|a| a.describe()).collect();
        report_lines.push_str(&format!(
            "{id}\t{seed}\t{mode}\t{}\n",
            applied.join(";")
        ));
    }
    std::fs::write(out_dir.join("report.tsv"), &report_lines)
        .map_err(|e| Error::io(out_dir.join("report.tsv"), e))?;
    manifest::write_manifest(
        &Manifest {
            entries: degraded_entries,
        },
        out_dir.join("degraded.tsv"),
    )?;
    manifest::write_manifest(
        &Manifest {
            entries: target_entries,
        },
        out_dir.join("targets.tsv"),
    )?;
    config::write_meta(
        out_dir.join("report.tsv.meta"),
        &[("config_hash", hash.into()), ("seed", cfg.seed.to_string())],
    )?;
    println!("degraded {n} utterances into {}", out_dir.display());
    Ok(())
}

fn cmd_train_codec(cfg: &RunConfig, hash: &str, manifest_path: &Path, out: &Path) -> Result<()> {
    let (speech, _, _) = load_pools(manifest_path)?;
    let corpus: Vec<AudioBuffer> = speech.into_iter().map(|u| u.audio).collect();
    let c = Codec::train(
        &corpus,
        cfg.codec.k_s,
        cfg.codec.k_g,
        cfg.codec.n_mels,
        cfg.codec.train_seed,
    )?;
    codec::save(&c, out)?;
    config::write_meta(
        PathBuf::from(format!("{}.meta", out.display())),
        &[
            ("config_hash", hash.into()),
            ("seed", cfg.codec.train_seed.to_string()),
            ("file_sha256", file_sha256(out)?),
        ],
    )?;
    println!(
        "codec trained on {} utterances: k_s={} k_g={} n_mels={} -> {}",
        corpus.len(),
        c.k_s(),
        c.k_g(),
        c.n_mels,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    hash: &str,
    manifest_path: &Path,
    codec_path: &Path,
    out: &Path,
    max_steps: Option<u64>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let (speech, noises, rirs) = load_pools(manifest_path)?;
    let codec = codec::load(codec_path)?;
    let codec_sha = file_sha256(codec_path)?;
    let data = TrainData {
        speech,
        noises,
        rirs,
    };
    let mut trainer = match resume {
        Some(ckpt_path) => {
            let loaded = checkpoint::load(&ckpt_path)?;
            if loaded.codec_hash != codec_sha {
                return Err(Error::Train(format!(
                    "checkpoint was trained with codec {} but {} has hash {}",
                    loaded.codec_hash,
                    codec_path.display(),
                    codec_sha
                )));
            }
            let mut t = Trainer::new(
                loaded.model,
                loaded.encoder,
                codec,
                cfg.degrade.clone(),
                data,
                loaded.train_config,
            )?;
            t.state.opt = loaded.opt;
            t.state.step = loaded.step;
            t.state.epoch = loaded.epoch;
            t.state.rejected_steps = loaded.rejected_steps;
            t
        }
        None => Trainer::new(
            LmModel::new(cfg.model)?,
            EncoderStack::new(cfg.encoder),
            codec,
            cfg.degrade.clone(),
            data,
            cfg.train.clone(),
        )?,
    };

    let counts = speechlm::lm::param_count(&trainer.state.model.config);
    println!(
        "params total={} without_embeddings={}",
        counts.total, counts.without_embeddings
    );
    let every = trainer.state.config.checkpoint_every.max(1);
    let mut save_err: Option<Error> = None;
    trainer.run(max_steps, |o, state| {
        println!(
            "step={} epoch={} mode={} loss={:.6} acc={:.4} gnorm={:.4} lr={:.3e} applied={}",
            o.step, o.epoch, o.mode, o.loss, o.accuracy, o.grad_norm, o.lr, o.applied
        );
        if (o.step + 1) % every == 0 && save_err.is_none() {
            if let Err(e) = checkpoint::save(out, state, &codec_sha, hash) {
                save_err = Some(e);
            }
        }
    })?;
    if let Some(e) = save_err {
        return Err(e);
    }
    checkpoint::save(out, &trainer.state, &codec_sha, hash)?;
    config::write_meta(
        PathBuf::from(format!("{}.meta", out.display())),
        &[
            ("config_hash", hash.into()),
            ("seed", trainer.state.config.seed.to_string()),
            ("codec_sha256", codec_sha),
            ("file_sha256", file_sha256(out)?),
        ],
    )?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

struct LoadedBundle {
    model: LmModel,
    encoder: EncoderStack,
    codec: Codec,
    model_sha: String,
    codec_sha: String,
}

fn load_bundle(model_path: &Path, codec_path: &Path, force: bool) -> Result<LoadedBundle> {
    let loaded = checkpoint::load(model_path)?;
    let codec = codec::load(codec_path)?;
    let codec_sha = file_sha256(codec_path)?;
    if loaded.codec_hash != codec_sha && !force {
        return Err(Error::Checkpoint {
            path: model_path.to_path_buf(),
            detail: format!(
                "model was trained with codec hash {} but {} has hash {} (pass --force to override)",
                loaded.codec_hash,
                codec_path.display(),
                codec_sha
            ),
        });
    }
    Ok(LoadedBundle {
        model: loaded.model,
        encoder: loaded.encoder,
        codec,
        model_sha: file_sha256(model_path)?,
        codec_sha,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    cfg: &RunConfig,
    hash: &str,
    mode: ModeArg,
    input: &Path,
    reference: Option<&Path>,
    output: &Path,
    model_path: &Path,
    codec_path: &Path,
    sampler: Sampler,
    force: bool,
) -> Result<()> {
    let needs_ref = matches!(mode, ModeArg::Tse | ModeArg::Rtse);
    if needs_ref && reference.is_none() {
        return Err(Error::Stage {
            stage: "infer",
            detail: "--reference is required for tse and rtse modes".into(),
        });
    }
    let bundle = load_bundle(model_path, codec_path, force)?;
    let input_buf = read_wav(input)?;
    let ref_buf = reference.map(read_wav).transpose()?;
    let mut pipeline = Pipeline::new(&bundle.model, &bundle.codec, &bundle.encoder);
    pipeline.sampler = sampler;
    pipeline.seed = cfg.seed;
    if let Some(seg) = cfg.segment_sec {
        pipeline.segment_sec = seg;
    }

    let meta = |extra: &mut Vec<(&'static str, String)>| {
        extra.push(("config_hash", hash.to_string()));
        extra.push(("seed", cfg.seed.to_string()));
        extra.push(("model_sha256", bundle.model_sha.clone()));
        extra.push(("codec_sha256", bundle.codec_sha.clone()));
    };

    match mode {
        ModeArg::Ss => {
            let (s1, s2) = pipeline.run_ss(&input_buf)?;
            for w in s1.warnings.iter().chain(&s2.warnings) {
                eprintln!("warning: {w}");
            }
            let (p1, p2) = ss_output_paths(output);
            write_wav(&s1.audio, &p1)?;
            write_wav(&s2.audio, &p2)?;
            for p in [&p1, &p2] {
                let mut entries = Vec::new();
                meta(&mut entries);
                config::write_meta(PathBuf::from(format!("{}.meta", p.display())), &entries)?;
            }
            println!("wrote {} and {}", p1.display(), p2.display());
        }
        _ => {
            let m = mode_of(mode).expect("single mode");
            let out = match m {
                Mode::Sr => pipeline.run_sr(&input_buf)?,
                Mode::Tse => pipeline.run_tse(&input_buf, ref_buf.as_ref().unwrap())?,
                Mode::Rtse => pipeline.run_rtse(&input_buf, ref_buf.as_ref().unwrap())?,
            };
            for w in &out.warnings {
                eprintln!("warning: {w}");
            }
            write_wav(&out.audio, output)?;
            let mut entries = Vec::new();
            meta(&mut entries);
            config::write_meta(PathBuf::from(format!("{}.meta", output.display())), &entries)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

/// `out.wav` becomes `out.spk1.wav` / `out.spk2.wav`.
fn ss_output_paths(output: &Path) -> (PathBuf, PathBuf) {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".into());
    let ext = output
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    let dir = output.parent().unwrap_or(Path::new(""));
    (
        dir.join(format!("{stem}.spk1{ext}")),
        dir.join(format!("{stem}.spk2{ext}")),
    )
}

fn cmd_eval(
    cfg: &RunConfig,
    hash: &str,
    ref_manifest: &Path,
    est_manifest: &Path,
    model_path: Option<&Path>,
    out: Option<&Path>,
    force: bool,
) -> Result<()> {
    let refs = manifest::load_manifest(ref_manifest)?;
    let ests = manifest::load_manifest(est_manifest)?;
    let est_by_id: std::collections::HashMap<&str, &Entry> = ests
        .entries
        .iter()
        .map(|e| (e.utterance_id.as_str(), e))
        .collect();

    // The similarity encoder comes from the checkpoint when given, so scores
    // are comparable across runs of the same model.
    let (encoder, model_sha, codec_sha) = match model_path {
        Some(p) => {
            let loaded = checkpoint::load(p)?;
            (loaded.encoder, Some(file_sha256(p)?), Some(loaded.codec_hash))
        }
        None => (EncoderStack::new(cfg.encoder), None, None),
    };

    let mut report = MetricReport::default();
    let mut lines = String::new();
    for re in &refs.entries {
        let ee = est_by_id.get(re.utterance_id.as_str()).ok_or_else(|| {
            Error::Eval(format!(
                "estimate manifest lacks utterance {:?}",
                re.utterance_id
            ))
        })?;
        // Artifact identity checks against the estimate's sidecar meta.
        let meta_path = PathBuf::from(format!("{}.meta", ee.path.display()));
        if meta_path.exists() {
            let meta = config::read_meta(&meta_path)?;
            let field = |k: &str| meta.iter().find(|(mk, _)| mk == k).map(|(_, v)| v.clone());
            if let (Some(model_sha), Some(produced_by)) = (&model_sha, field("model_sha256")) {
                if &produced_by != model_sha && !force {
                    return Err(Error::Eval(format!(
                        "{} was produced by model {} but --model has hash {} (pass --force to override)",
                        ee.path.display(),
                        produced_by,
                        model_sha
                    )));
                }
            }
            if let (Some(codec_sha), Some(produced_with)) = (&codec_sha, field("codec_sha256")) {
                if &produced_with != codec_sha && !force {
                    return Err(Error::Eval(format!(
                        "{} was produced with codec {} but the model was trained with {} (pass --force to override)",
                        ee.path.display(),
                        produced_with,
                        codec_sha
                    )));
                }
            }
        }
        let ref_buf = read_wav(&re.path)?;
        let est_buf = read_wav(&ee.path)?;
        let sdr = si_sdr(&ref_buf, &est_buf)?;
        let lsd = log_spectral_distance(&ref_buf, &est_buf)?;
        let sim = speaker_sim(&ref_buf, &est_buf, &encoder).ok();
        lines.push_str(&format!(
            "{}\tsi_sdr_db={sdr:.4}\tlsd_db={lsd:.4}\tspeaker_sim={}\n",
            re.utterance_id,
            sim.map_or("n/a".into(), |v| format!("{v:.4}")),
        ));
        report.rows.push(MetricRow {
            utterance_id: re.utterance_id.clone(),
            si_sdr_db: sdr,
            lsd_db: lsd,
            speaker_sim: sim,
        });
    }
    let footer = format!(
        "corpus\tn={}\tmean_si_sdr_db={:.4}\tmean_lsd_db={:.4}\tmean_speaker_sim={}\tconfig_hash={hash}\n",
        report.rows.len(),
        report.mean_si_sdr(),
        report.mean_lsd(),
        report
            .mean_speaker_sim()
            .map_or("n/a".into(), |v| format!("{v:.4}")),
    );
    print!("{lines}{footer}");
    if let Some(out) = out {
        std::fs::write(out, format!("{lines}{footer}")).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}
