//! Tab-separated dataset manifests: one record per line,
//! `utterance_id \t path \t kind \t duration_sec`.
//!
//! Speaker identity, where a task needs it, is the portion of the utterance
//! id before the first underscore (e.g. `spk0_utt3` belongs to `spk0`).

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Clean,
    Noise,
    Rir,
}

impl Kind {
    fn parse(s: &str) -> Option<Kind> {
        match s {
            "clean" => Some(Kind::Clean),
            "noise" => Some(Kind::Noise),
            "rir" => Some(Kind::Rir),
            _ => None,
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Clean => "clean",
            Kind::Noise => "noise",
            Kind::Rir => "rir",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub utterance_id: String,
    pub path: PathBuf,
    pub kind: Kind,
    pub duration_sec: f64,
}

impl Entry {
    /// Speaker label: utterance id up to the first underscore.
    pub fn speaker(&self) -> &str {
        self.utterance_id
            .split_once('_')
            .map_or(self.utterance_id.as_str(), |(s, _)| s)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn of_kind(&self, kind: Kind) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.kind == kind)
    }
}

/// Load a manifest, preserving file order. Duplicate utterance ids and
/// unresolvable paths are rejected with the offending line number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                detail: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let utterance_id = fields[0].to_string();
        if !seen.insert(utterance_id.clone()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                detail: format!("duplicate utterance id {utterance_id:?}"),
            });
        }
        let kind = Kind::parse(fields[2]).ok_or_else(|| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            detail: format!("unknown kind {:?} (expected clean|noise|rir)", fields[2]),
        })?;
        let duration_sec: f64 = fields[3].parse().map_err(|_| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno,
            detail: format!("bad duration {:?}", fields[3]),
        })?;
        let raw = PathBuf::from(fields[1]);
        let resolved = if raw.is_absolute() { raw } else { base.join(raw) };
        if !resolved.exists() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno,
                detail: format!("path does not exist: {}", resolved.display()),
            });
        }
        entries.push(Entry {
            utterance_id,
            path: resolved,
            kind,
            duration_sec,
        });
    }
    Ok(Manifest { entries })
}

/// Write a manifest in the same TSV format `load_manifest` reads.
pub fn write_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in &m.entries {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.utterance_id,
            e.path.display(),
            e.kind,
            e.duration_sec
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
