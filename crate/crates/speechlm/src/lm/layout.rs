//! Sequence assembly for the three operational modes.
//!
//! Training layouts (mode shown for SR; TSE/rTSE prepend the reference
//! conditions after their task token):
//!
//! ```text
//! [task, D, cond_d..., G, g_0..g_31, S, s_0..s_{T-1}]
//! ```
//!
//! The supervised output reads `[g_0..g_31, S, s_0..s_{T-1}, E]`: the
//! position holding marker G predicts the first global token, each token
//! position predicts its successor, and the last semantic position predicts
//! the end-of-sequence token. Inference prefixes stop right after G.

use super::vocab::{Special, Vocab};
use crate::codec::{GlobalTokens, SemanticTokens};
use crate::cond::CondFeatures;
use crate::error::{Error, Result};
use crate::Mode;

/// One input position: a vocabulary token or a row of condition features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Item {
    Token(u32),
    /// Row index into the degraded-condition frames.
    CondD(usize),
    /// Row index into the reference-condition frames.
    CondR(usize),
}

/// An assembled model input with its supervision arrays.
#[derive(Debug, Clone)]
pub struct SequenceLayout {
    pub mode: Mode,
    pub items: Vec<Item>,
    /// Next-token label per position; `None` exactly where `mask` is false.
    pub labels: Vec<Option<u32>>,
    /// True at positions whose next token belongs to the output sequence.
    pub mask: Vec<bool>,
    pub cond_d: CondFeatures,
    pub cond_r: Option<CondFeatures>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

fn check_reference(mode: Mode, cond_r: &Option<CondFeatures>) -> Result<()> {
    match (mode.needs_reference(), cond_r.is_some()) {
        (true, false) => Err(Error::Lm(format!(
            "{mode} mode requires reference conditions"
        ))),
        (false, true) => Err(Error::Lm(format!(
            "{mode} mode takes no reference conditions"
        ))),
        _ => Ok(()),
    }
}

fn push_prefix(
    vocab: &Vocab,
    mode: Mode,
    cond_d: &CondFeatures,
    cond_r: &Option<CondFeatures>,
    items: &mut Vec<Item>,
) {
    items.push(Item::Token(vocab.task_token(mode)));
    if let Some(r) = cond_r {
        items.push(Item::Token(vocab.special(Special::StartReference)));
        for i in 0..r.len() {
            items.push(Item::CondR(i));
        }
    }
    items.push(Item::Token(vocab.special(Special::StartDegraded)));
    for i in 0..cond_d.len() {
        items.push(Item::CondD(i));
    }
    items.push(Item::Token(vocab.special(Special::StartGlobal)));
}

/// Teacher-forced training layout carrying the target token streams.
pub fn training_layout(
    vocab: &Vocab,
    mode: Mode,
    cond_d: CondFeatures,
    cond_r: Option<CondFeatures>,
    target_global: &GlobalTokens,
    target_semantic: &SemanticTokens,
) -> Result<SequenceLayout> {
    check_reference(mode, &cond_r)?;
    if cond_d.is_empty() {
        return Err(Error::Lm("empty degraded conditions".into()));
    }
    if target_semantic.is_empty() {
        return Err(Error::Lm("empty semantic target".into()));
    }
    let mut items = Vec::new();
    push_prefix(vocab, mode, &cond_d, &cond_r, &mut items);

    // The full output sequence o = [globals, S, semantics, E] in vocabulary ids.
    let mut output = Vec::with_capacity(target_global.ids.len() + target_semantic.len() + 2);
    for &gid in &target_global.ids {
        output.push(vocab.global(gid)?);
    }
    output.push(vocab.special(Special::StartSemantic));
    for &sid in &target_semantic.ids {
        output.push(vocab.semantic(sid)?);
    }
    output.push(vocab.special(Special::EndOfSequence));

    // Teacher forcing: all of o except the final E enters the input; every
    // position from marker G onward is supervised with the next output token.
    let prefix_len = items.len(); // ends at G
    for &id in &output[..output.len() - 1] {
        items.push(Item::Token(id));
    }
    let total = items.len();
    let mut labels = vec![None; total];
    let mut mask = vec![false; total];
    for (k, &id) in output.iter().enumerate() {
        let pos = prefix_len - 1 + k; // G predicts output[0]
        labels[pos] = Some(id);
        mask[pos] = true;
    }
    Ok(SequenceLayout {
        mode,
        items,
        labels,
        mask,
        cond_d,
        cond_r,
    })
}

/// Generation prefix: ends at marker G, no labels.
pub fn inference_prefix(
    vocab: &Vocab,
    mode: Mode,
    cond_d: CondFeatures,
    cond_r: Option<CondFeatures>,
) -> Result<SequenceLayout> {
    check_reference(mode, &cond_r)?;
    if cond_d.is_empty() {
        return Err(Error::Lm("empty degraded conditions".into()));
    }
    let mut items = Vec::new();
    push_prefix(vocab, mode, &cond_d, &cond_r, &mut items);
    let total = items.len();
    Ok(SequenceLayout {
        mode,
        items,
        labels: vec![None; total],
        mask: vec![false; total],
        cond_d,
        cond_r,
    })
}
