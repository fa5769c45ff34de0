//! Multi-turn multimodal data model and sequence layouts.
//!
//! A [`ConversationExample`] is an optional synthetic image followed by
//! alternating prompt/response turns. [`layout`] flattens it into a
//! [`SequenceLayout`]: image features first (turn 0), then per dialogue turn
//! the prompt and response, positions dense from 0. The layout is the
//! substrate for response-only corruption, loss masking, and the three
//! attention-mask regimes.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::{TokenId, Vocab};
use crate::{diffusion, Error, Result};

/// A tiny integer grid standing in for an image; one feature per cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub grid: Vec<Vec<u32>>,
}

impl SyntheticImage {
    pub fn feature_count(&self) -> usize {
        self.grid.iter().map(|row| row.len()).sum()
    }

    /// Cells in reading order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        self.grid
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &v)| (r, c, v)))
    }
}

/// One dialogue turn: a prompt and its ground-truth response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

/// Corpus class an example belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorpusClass {
    #[serde(rename = "DIRECT")]
    Direct,
    #[serde(rename = "REASONING")]
    Reasoning,
}

/// Think-tag applied to an example's prompts (manifest as an appended
/// reserved token; `None` means untouched prompts).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TagKind {
    Think,
    NoThink,
    #[default]
    None,
}

/// A training example: optional image, one or more turns, corpus class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationExample {
    pub image: Option<SyntheticImage>,
    pub turns: Vec<Turn>,
    pub class: CorpusClass,
}

impl ConversationExample {
    /// Structural validation for training examples: at least one turn, every
    /// prompt and response non-empty, all tokens below the vocabulary total.
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Validation("example has no turns".into()));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.prompt.is_empty() {
                return Err(Error::Validation(format!("turn {i} has empty prompt")));
            }
            if turn.response.is_empty() {
                return Err(Error::Validation(format!("turn {i} has empty response")));
            }
            for &tok in turn.prompt.iter().chain(&turn.response) {
                if tok as usize >= vocab.total() {
                    return Err(Error::Validation(format!(
                        "token {tok} out of range for vocab total {}",
                        vocab.total()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tag inferred from the trailing token of the first prompt.
    pub fn detect_tag(&self, vocab: &Vocab) -> TagKind {
        match self.turns.first().and_then(|t| t.prompt.last()) {
            Some(&tok) if tok == vocab.think() => TagKind::Think,
            Some(&tok) if tok == vocab.no_think() => TagKind::NoThink,
            _ => TagKind::None,
        }
    }
}

/// Segment role of a layout position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Image,
    Prompt,
    Response,
}

/// Content of a layout position: an image-feature reference, a token, or MASK.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Feature(usize),
    Token(TokenId),
    Masked,
}

/// One flattened position: role, dialogue turn index, and content.
///
/// The image block is turn 0; dialogue turn `i` (0-based) maps to turn index
/// `i + 1` whether or not an image is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayoutEntry {
    pub role: Role,
    pub turn: usize,
    pub slot: Slot,
}

/// Flattened position map for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLayout {
    pub image: Option<SyntheticImage>,
    pub entries: Vec<LayoutEntry>,
    /// Number of dialogue turns (excluding the image block).
    pub n_turns: usize,
}

impl SequenceLayout {
    pub fn total_length(&self) -> usize {
        self.entries.len()
    }

    /// Indices of response positions across all turns, in layout order.
    pub fn response_positions(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| (e.role == Role::Response).then_some(i))
            .collect()
    }

    /// Token at position `i` if it holds one (not masked, not a feature).
    pub fn token_at(&self, i: usize) -> Option<TokenId> {
        match self.entries[i].slot {
            Slot::Token(t) => Some(t),
            _ => None,
        }
    }

    /// Reconstruct the originating example. Fails on corrupted layouts.
    pub fn to_example(&self, class: CorpusClass) -> Result<ConversationExample> {
        let mut turns: Vec<Turn> = Vec::new();
        for entry in &self.entries {
            match entry.role {
                Role::Image => continue,
                Role::Prompt | Role::Response => {
                    let tok = match entry.slot {
                        Slot::Token(t) => t,
                        _ => {
                            return Err(Error::Validation(
                                "cannot reconstruct example from corrupted layout".into(),
                            ))
                        }
                    };
                    while turns.len() < entry.turn {
                        turns.push(Turn {
                            prompt: Vec::new(),
                            response: Vec::new(),
                        });
                    }
                    let turn = &mut turns[entry.turn - 1];
                    match entry.role {
                        Role::Prompt => turn.prompt.push(tok),
                        Role::Response => turn.response.push(tok),
                        Role::Image => unreachable!(),
                    }
                }
            }
        }
        Ok(ConversationExample {
            image: self.image.clone(),
            turns,
            class,
        })
    }
}

/// Flatten an example: image features (if any), then per turn the prompt and
/// response, in order.
pub fn layout(example: &ConversationExample) -> Result<SequenceLayout> {
    if example.turns.is_empty() {
        return Err(Error::Validation("example has no turns".into()));
    }
    let mut entries = Vec::new();
    if let Some(img) = &example.image {
        for f in 0..img.feature_count() {
            entries.push(LayoutEntry {
                role: Role::Image,
                turn: 0,
                slot: Slot::Feature(f),
            });
        }
    }
    for (i, turn) in example.turns.iter().enumerate() {
        if turn.prompt.is_empty() || turn.response.is_empty() {
            return Err(Error::Validation(format!(
                "turn {i} has an empty prompt or response"
            )));
        }
        for &tok in &turn.prompt {
            entries.push(LayoutEntry {
                role: Role::Prompt,
                turn: i + 1,
                slot: Slot::Token(tok),
            });
        }
        for &tok in &turn.response {
            entries.push(LayoutEntry {
                role: Role::Response,
                turn: i + 1,
                slot: Slot::Token(tok),
            });
        }
    }
    Ok(SequenceLayout {
        image: example.image.clone(),
        entries,
        n_turns: example.turns.len(),
    })
}

/// Independently mask each response token with probability `t`, the same `t`
/// shared across every turn. Image and prompt positions are untouched.
pub fn corrupt_responses<R: Rng>(
    lay: &SequenceLayout,
    t: f64,
    rng: &mut R,
) -> Result<SequenceLayout> {
    diffusion::check_noise_level(t)?;
    let mut out = lay.clone();
    for entry in &mut out.entries {
        if entry.role == Role::Response {
            if let Slot::Token(_) = entry.slot {
                if rng.gen::<f64>() < t {
                    entry.slot = Slot::Masked;
                }
            }
        }
    }
    Ok(out)
}

/// Attention regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMaskKind {
    Causal,
    DialogueCausal,
    #[default]
    NoMask,
}

/// Dense boolean attention matrix; `allowed(q, k)` is true when query
/// position `q` may attend key position `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n + k]
    }

    fn full(n: usize, value: bool) -> Self {
        Self {
            n,
            bits: vec![value; n * n],
        }
    }

    /// Build an arbitrary matrix from a pair predicate (test hooks and
    /// custom regimes).
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::full(n, false);
        for q in 0..n {
            for k in 0..n {
                if f(q, k) {
                    m.set(q, k, true);
                }
            }
        }
        m
    }

    fn set(&mut self, q: usize, k: usize, value: bool) {
        self.bits[q * self.n + k] = value;
    }
}

/// Build the attention matrix for a layout.
///
/// `Causal`: `k <= q`. `DialogueCausal`: `turn(k) <= turn(q)` with the image
/// block as turn 0 (visible to all, attending within turn 0 only) and, within
/// one turn, prompt and response forming a single unrestricted block.
/// `NoMask`: all pairs allowed.
pub fn build_attention_mask(lay: &SequenceLayout, kind: AttentionMaskKind) -> AttentionMatrix {
    let n = lay.total_length();
    match kind {
        AttentionMaskKind::NoMask => AttentionMatrix::full(n, true),
        AttentionMaskKind::Causal => {
            let mut m = AttentionMatrix::full(n, false);
            for q in 0..n {
                for k in 0..=q {
                    m.set(q, k, true);
                }
            }
            m
        }
        AttentionMaskKind::DialogueCausal => {
            // Turns are contiguous and non-decreasing, so "turn(k) <= turn(q)"
            // is a prefix of keys: everything before the end of q's turn.
            let mut m = AttentionMatrix::full(n, false);
            let mut turn_end = vec![0usize; lay.n_turns + 2];
            for (i, entry) in lay.entries.iter().enumerate() {
                turn_end[entry.turn] = i + 1;
            }
            // An empty image block leaves turn_end[0] at 0; that is correct
            // (no keys precede turn 1).
            for (q, entry) in lay.entries.iter().enumerate() {
                let end = turn_end[entry.turn];
                for k in 0..end {
                    m.set(q, k, true);
                }
            }
            m
        }
    }
}

/// Append think/no-think tags to a class-homogeneous batch of examples.
///
/// `Direct` examples get `NO_THINK` appended to every prompt; `Reasoning`
/// examples get `THINK` with probability 0.5 (per example), else stay
/// untouched. Deterministic under a fixed generator.
pub fn apply_tag_policy<R: Rng>(
    examples: Vec<ConversationExample>,
    policy: CorpusClass,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Vec<ConversationExample>> {
    let tagged = examples
        .into_iter()
        .map(|mut ex| {
            for turn in &ex.turns {
                if let Some(&last) = turn.prompt.last() {
                    if last >= vocab.think() {
                        return Err(Error::Config(
                            "prompt already ends in a reserved id; vocabulary lacks free \
                             tag positions or tags were applied twice"
                                .into(),
                        ));
                    }
                }
            }
            let tag = match policy {
                CorpusClass::Direct => Some(vocab.no_think()),
                CorpusClass::Reasoning => {
                    if rng.gen::<f64>() < 0.5 {
                        Some(vocab.think())
                    } else {
                        None
                    }
                }
            };
            if let Some(tag_tok) = tag {
                for turn in &mut ex.turns {
                    turn.prompt.push(tag_tok);
                }
            }
            Ok(ex)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tagged)
}

/// Write a corpus as JSONL, one example per line.
pub fn write_corpus(path: &Path, examples: &[ConversationExample]) -> Result<()> {
    let mut file = File::create(path)?;
    for ex in examples {
        serde_json::to_writer(&mut file, ex)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSONL corpus.
pub fn read_corpus(path: &Path) -> Result<Vec<ConversationExample>> {
    let file = File::open(path)?;
    let mut examples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(serde_json::from_str(&line)?);
    }
    Ok(examples)
}
