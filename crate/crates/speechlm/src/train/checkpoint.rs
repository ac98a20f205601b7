//! Single-file binary checkpoint: versioned magic, TOML config header,
//! vocabulary layout table, every tensor tagged frozen/trainable, optimizer
//! moments and run counters. Byte-exact round trips by construction.

use std::io::Write;
use std::path::Path;

use super::{TrainConfig, TrainState};
use crate::cond::{EncoderConfig, EncoderStack};
use crate::error::{Error, Result};
use crate::lm::{LmModel, ModelConfig, Special};
use crate::train::optim::AdamW;

const MAGIC: &[u8; 8] = b"SPLMCKP\x01";
const VERSION: u32 = 1;

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    model: ModelConfig,
    encoder: EncoderConfig,
    train: TrainConfig,
    codec_hash: String,
    config_hash: String,
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_bytes(out, s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, what: &str) -> Error {
        Error::Checkpoint {
            path: self.path.to_path_buf(),
            detail: format!("{what} at offset {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes_field(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn str_field(&mut self) -> Result<String> {
        let b = self.bytes_field()?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("bad utf-8"))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Write the full training state (or an inference model when `opt` is None
/// inside the state) to one file.
pub fn save(
    path: impl AsRef<Path>,
    state: &TrainState,
    codec_hash: &str,
    config_hash: &str,
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        model: state.model.config,
        encoder: state.encoder.config,
        train: state.config.clone(),
        codec_hash: codec_hash.to_string(),
        config_hash: config_hash.to_string(),
    };
    let header_toml = toml::to_string(&header)
        .map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            detail: format!("header serialization: {e}"),
        })?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &header_toml);

    // Vocabulary layout table.
    let vocab = state.model.config.vocab();
    out.extend_from_slice(&(vocab.k_s as u32).to_le_bytes());
    out.extend_from_slice(&(vocab.k_g as u32).to_le_bytes());
    for s in [
        Special::TaskSr,
        Special::TaskTse,
        Special::TaskRtse,
        Special::StartDegraded,
        Special::StartReference,
        Special::StartGlobal,
        Special::StartSemantic,
        Special::EndOfSequence,
    ] {
        out.extend_from_slice(&vocab.special(s).to_le_bytes());
    }

    // Counters and seed.
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.epoch).to_le_bytes());
    out.extend_from_slice(&state.rejected_steps.to_le_bytes());
    out.extend_from_slice(&state.config.seed.to_le_bytes());

    // Tensors, frozen/trainable tagged.
    let mut tensors = state.model.export_tensors();
    tensors.extend(state.encoder.export_tensors());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, frozen, shape, data) in &tensors {
        put_str(&mut out, name);
        out.push(u8::from(*frozen));
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        put_f32s(&mut out, data);
    }

    // Optimizer moments, sorted by name for a canonical byte stream.
    out.extend_from_slice(&state.opt.t.to_le_bytes());
    let mut names: Vec<&String> = state.opt.moments.keys().collect();
    names.sort();
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for name in names {
        let (m, v) = &state.opt.moments[name];
        put_str(&mut out, name);
        put_f32s(&mut out, m);
        put_f32s(&mut out, v);
    }

    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Everything a checkpoint holds.
pub struct Loaded {
    pub model: LmModel,
    pub encoder: EncoderStack,
    pub opt: AdamW,
    pub step: u64,
    pub epoch: u32,
    pub rejected_steps: u64,
    pub train_config: TrainConfig,
    pub codec_hash: String,
    pub config_hash: String,
}

pub fn load(path: impl AsRef<Path>) -> Result<Loaded> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    if r.u32()? != VERSION {
        return Err(r.fail("unsupported version"));
    }
    let header_toml = r.str_field()?;
    let header: Header = toml::from_str(&header_toml).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: format!("header parse: {e}"),
    })?;

    // Vocabulary table (validated against the config).
    let k_s = r.u32()? as usize;
    let k_g = r.u32()? as usize;
    if k_s != header.model.k_s || k_g != header.model.k_g {
        return Err(r.fail("vocabulary table disagrees with config"));
    }
    for _ in 0..8 {
        r.u32()?;
    }

    let step = r.u64()?;
    let epoch = r.u32()?;
    let rejected_steps = r.u64()?;
    let seed = r.u64()?;
    if seed != header.train.seed {
        return Err(r.fail("seed mismatch between header and counters"));
    }

    let mut model = LmModel::new(header.model)?;
    let mut encoder = EncoderStack::new(header.encoder);
    let n_tensors = r.u32()?;
    for _ in 0..n_tensors {
        let name = r.str_field()?;
        let _frozen = r.take(1)?[0] != 0;
        let ndim = r.u32()?;
        for _ in 0..ndim {
            r.u64()?;
        }
        let data = r.f32s()?;
        if name.starts_with("lm.") {
            model.import_tensor(&name, &data)?;
        } else {
            encoder.import_tensor(&name, &data)?;
        }
    }

    let mut opt = AdamW::new(&header.train);
    opt.t = r.u64()?;
    let n_moments = r.u32()?;
    for _ in 0..n_moments {
        let name = r.str_field()?;
        let m = r.f32s()?;
        let v = r.f32s()?;
        opt.moments.insert(name, (m, v));
    }

    Ok(Loaded {
        model,
        encoder,
        opt,
        step,
        epoch,
        rejected_steps,
        train_config: header.train,
        codec_hash: header.codec_hash,
        config_hash: header.config_hash,
    })
}
