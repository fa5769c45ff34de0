//! Token id space: content vocabulary plus reserved sentinels.
//!
//! Content tokens occupy `[0, K)`. The five reserved ids sit at the top of
//! the range, in this fixed order:
//!
//! | id      | token      |
//! |---------|------------|
//! | `K`     | `EOS`      |
//! | `K + 1` | `THINK`    |
//! | `K + 2` | `NO_THINK` |
//! | `K + 3` | `PAD`      |
//! | `K + 4` | `MASK`     |
//!
//! Model predictions range over `[0, K]` — content plus `EOS` — so generated
//! responses can terminate and pad with `EOS`, while `MASK` and `PAD` are
//! never predictable. `THINK`/`NO_THINK` appear only appended to prompts.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// Vocabulary descriptor: content size `K` plus the five reserved ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Number of content tokens, `K >= 2`.
    pub content: usize,
}

impl Vocab {
    pub fn new(content: usize) -> crate::Result<Self> {
        if content < 2 {
            return Err(crate::Error::Config(format!(
                "content vocabulary must have K >= 2, got {content}"
            )));
        }
        Ok(Self { content })
    }

    pub fn eos(&self) -> TokenId {
        self.content as TokenId
    }

    pub fn think(&self) -> TokenId {
        self.content as TokenId + 1
    }

    pub fn no_think(&self) -> TokenId {
        self.content as TokenId + 2
    }

    pub fn pad(&self) -> TokenId {
        self.content as TokenId + 3
    }

    pub fn mask(&self) -> TokenId {
        self.content as TokenId + 4
    }

    /// Total number of ids (content + 5 reserved): the embedding table height.
    pub fn total(&self) -> usize {
        self.content + 5
    }

    /// Width of the prediction head: content tokens plus `EOS`.
    pub fn output_width(&self) -> usize {
        self.content + 1
    }

    /// True for ids a model may emit (content or `EOS`).
    pub fn is_predictable(&self, id: TokenId) -> bool {
        (id as usize) < self.output_width()
    }
}
