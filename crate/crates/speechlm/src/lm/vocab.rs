//! Token id space: semantic codec ids, offset global codec ids, and the
//! eight special tokens (three task selectors plus five sequence markers).

use crate::error::{Error, Result};
use crate::Mode;

/// The eight special tokens, in id order above the codec blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    TaskSr,
    TaskTse,
    TaskRtse,
    /// Start of degraded-speech conditions.
    StartDegraded,
    /// Start of reference-speech conditions.
    StartReference,
    /// Start of the global token block.
    StartGlobal,
    /// Start of the semantic token block.
    StartSemantic,
    EndOfSequence,
}

pub const NUM_SPECIALS: usize = 8;

/// Id layout: `[0, k_s)` semantic, `[k_s, k_s + k_g)` global,
/// then the specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Vocab {
    pub k_s: usize,
    pub k_g: usize,
}

impl Vocab {
    pub fn new(k_s: usize, k_g: usize) -> Self {
        Vocab { k_s, k_g }
    }

    pub fn size(&self) -> usize {
        self.k_s + self.k_g + NUM_SPECIALS
    }

    pub fn special(&self, s: Special) -> u32 {
        let base = (self.k_s + self.k_g) as u32;
        base + match s {
            Special::TaskSr => 0,
            Special::TaskTse => 1,
            Special::TaskRtse => 2,
            Special::StartDegraded => 3,
            Special::StartReference => 4,
            Special::StartGlobal => 5,
            Special::StartSemantic => 6,
            Special::EndOfSequence => 7,
        }
    }

    pub fn task_token(&self, mode: Mode) -> u32 {
        self.special(match mode {
            Mode::Sr => Special::TaskSr,
            Mode::Tse => Special::TaskTse,
            Mode::Rtse => Special::TaskRtse,
        })
    }

    /// Vocabulary id of a raw semantic codec id.
    pub fn semantic(&self, raw: u32) -> Result<u32> {
        if (raw as usize) < self.k_s {
            Ok(raw)
        } else {
            Err(Error::Lm(format!(
                "semantic id {raw} out of range [0, {})",
                self.k_s
            )))
        }
    }

    /// Vocabulary id of a raw global codec id.
    pub fn global(&self, raw: u32) -> Result<u32> {
        if (raw as usize) < self.k_g {
            Ok(self.k_s as u32 + raw)
        } else {
            Err(Error::Lm(format!(
                "global id {raw} out of range [0, {})",
                self.k_g
            )))
        }
    }

    pub fn is_semantic(&self, id: u32) -> bool {
        (id as usize) < self.k_s
    }

    pub fn is_global(&self, id: u32) -> bool {
        (id as usize) >= self.k_s && (id as usize) < self.k_s + self.k_g
    }

    /// Raw codec id of a global vocabulary id.
    pub fn global_raw(&self, id: u32) -> u32 {
        id - self.k_s as u32
    }

    pub fn semantic_range(&self) -> std::ops::Range<usize> {
        0..self.k_s
    }

    pub fn global_range(&self) -> std::ops::Range<usize> {
        self.k_s..self.k_s + self.k_g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_are_disjoint_and_cover_size() {
        let v = Vocab::new(1024, 256);
        assert_eq!(v.size(), 1288);
        assert!(v.is_semantic(0) && v.is_semantic(1023));
        assert!(!v.is_semantic(1024));
        assert!(v.is_global(1024) && v.is_global(1279));
        assert!(!v.is_global(1280));
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
            let id = v.special(s);
            assert!(!v.is_semantic(id) && !v.is_global(id));
            assert!((id as usize) < v.size());
        }
        assert_eq!(v.special(Special::EndOfSequence) as usize, v.size() - 1);
    }

    #[test]
    fn global_offset_round_trips() {
        let v = Vocab::new(64, 16);
        let id = v.global(5).unwrap();
        assert_eq!(id, 69);
        assert_eq!(v.global_raw(id), 5);
        assert!(v.global(16).is_err());
        assert!(v.semantic(64).is_err());
    }

    #[test]
    fn task_tokens_are_distinct() {
        let v = Vocab::new(8, 8);
        let ids: std::collections::HashSet<u32> =
            Mode::ALL.iter().map(|&m| v.task_token(m)).collect();
        assert_eq!(ids.len(), 3);
    }
}
