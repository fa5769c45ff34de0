//! Grid-caption tasks: desk-scale stand-ins for image-instruction data.
//!
//! A grid of colored shapes is captioned by its histogram: for every
//! (color, shape) combination present, in canonical (color, shape) order,
//! the caption emits `<count> <color> <shape>`. Captions are uniquely
//! determined by the grid, so exact match is well-defined. Count queries
//! ("how many cells have color c?") derive the reasoning-flavored family and
//! the second turn of two-turn dialogues.
//!
//! Responses are right-padded with `EOS` to the family's fixed length, so a
//! model learns both the caption and its termination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conversation::{ConversationExample, CorpusClass, SyntheticImage, Turn};
use crate::vocab::{TokenId, Vocab};
use crate::{rng, Error, Result};

/// Which examples a corpus holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// Single turn: caption the grid (perception-flavored, `DIRECT`).
    Caption,
    /// Single turn: answer a color-count query (reasoning-flavored,
    /// `REASONING`).
    CountQa,
    /// Two turns: caption, then a count query.
    CaptionThenCount,
}

/// Task parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCaptionTask {
    pub height: usize,
    pub width: usize,
    pub n_colors: usize,
    pub n_shapes: usize,
    /// When false the grid is serialized into the prompt as (color, shape)
    /// token pairs instead of image features (text-only control corpora).
    pub with_image: bool,
    pub family: TaskFamily,
}

impl GridCaptionTask {
    /// The 2x2 caption task the end-to-end criteria train on.
    pub fn default_caption() -> Self {
        Self {
            height: 2,
            width: 2,
            n_colors: 3,
            n_shapes: 3,
            with_image: true,
            family: TaskFamily::Caption,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height > 4 || self.width > 4 {
            return Err(Error::Validation(format!(
                "grid dims {}x{} outside 1..=4",
                self.height, self.width
            )));
        }
        if self.n_colors == 0 || self.n_shapes == 0 {
            return Err(Error::Validation("empty cell alphabet".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Number of count tokens: counts 0..=cells.
    fn n_counts(&self) -> usize {
        self.cells() + 1
    }

    pub fn n_cell_values(&self) -> usize {
        self.n_colors * self.n_shapes
    }

    /// Content vocabulary: counts, colors, shapes, and the two query tokens.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.n_counts() + self.n_colors + self.n_shapes + 2)
    }

    pub fn count_token(&self, count: usize) -> TokenId {
        debug_assert!(count <= self.cells());
        count as TokenId
    }

    pub fn color_token(&self, color: usize) -> TokenId {
        (self.n_counts() + color) as TokenId
    }

    pub fn shape_token(&self, shape: usize) -> TokenId {
        (self.n_counts() + self.n_colors + shape) as TokenId
    }

    pub fn caption_query_token(&self) -> TokenId {
        (self.n_counts() + self.n_colors + self.n_shapes) as TokenId
    }

    pub fn count_query_token(&self) -> TokenId {
        (self.n_counts() + self.n_colors + self.n_shapes + 1) as TokenId
    }

    /// Fixed response length of a caption (padded with EOS).
    pub fn caption_len(&self) -> usize {
        3 * self.cells().min(self.n_cell_values()) + 1
    }

    /// Fixed response length of a count answer.
    pub fn count_answer_len(&self) -> usize {
        2
    }

    /// Total distinct grids.
    pub fn grid_space(&self) -> usize {
        self.n_cell_values().pow(self.cells() as u32)
    }

    /// Decode a grid index into its cell matrix (reading order, base
    /// `n_cell_values`).
    pub fn decode_grid(&self, mut index: usize) -> SyntheticImage {
        let values = self.n_cell_values();
        let mut cells = vec![0u32; self.cells()];
        for slot in cells.iter_mut().rev() {
            *slot = (index % values) as u32;
            index /= values;
        }
        let grid = cells
            .chunks(self.width)
            .map(|row| row.to_vec())
            .collect();
        SyntheticImage { grid }
    }

    fn cell_color(&self, value: u32) -> usize {
        value as usize / self.n_shapes
    }

    fn cell_shape(&self, value: u32) -> usize {
        value as usize % self.n_shapes
    }

    /// Histogram caption: `<count> <color> <shape>` per present combination
    /// in (color, shape) order, terminated and padded with EOS.
    pub fn caption(&self, image: &SyntheticImage, vocab: &Vocab) -> Vec<TokenId> {
        let mut counts = vec![0usize; self.n_cell_values()];
        for (_, _, value) in image.cells() {
            counts[value as usize] += 1;
        }
        let mut tokens = Vec::with_capacity(self.caption_len());
        for color in 0..self.n_colors {
            for shape in 0..self.n_shapes {
                let value = color * self.n_shapes + shape;
                if counts[value] > 0 {
                    tokens.push(self.count_token(counts[value]));
                    tokens.push(self.color_token(color));
                    tokens.push(self.shape_token(shape));
                }
            }
        }
        tokens.push(vocab.eos());
        while tokens.len() < self.caption_len() {
            tokens.push(vocab.eos());
        }
        tokens
    }

    /// Number of cells with the given color.
    pub fn color_count(&self, image: &SyntheticImage, color: usize) -> usize {
        image
            .cells()
            .filter(|&(_, _, v)| self.cell_color(v) == color)
            .count()
    }

    /// Grid serialized as prompt tokens (text-only mode).
    fn grid_as_tokens(&self, image: &SyntheticImage) -> Vec<TokenId> {
        image
            .cells()
            .flat_map(|(_, _, v)| {
                [
                    self.color_token(self.cell_color(v)),
                    self.shape_token(self.cell_shape(v)),
                ]
            })
            .collect()
    }

    /// Build the example for one grid.
    pub fn example(
        &self,
        image: SyntheticImage,
        vocab: &Vocab,
        query_color: usize,
    ) -> ConversationExample {
        let caption_prompt = |task: &Self| -> Vec<TokenId> {
            let mut p = vec![task.caption_query_token()];
            if !task.with_image {
                p.extend(task.grid_as_tokens(&image));
            }
            p
        };
        let count_prompt = |task: &Self| -> Vec<TokenId> {
            let mut p = vec![task.count_query_token(), task.color_token(query_color)];
            if !task.with_image {
                p.extend(task.grid_as_tokens(&image));
            }
            p
        };
        let count_response = |task: &Self| -> Vec<TokenId> {
            vec![
                task.count_token(task.color_count(&image, query_color)),
                vocab.eos(),
            ]
        };
        let turns = match self.family {
            TaskFamily::Caption => vec![Turn {
                prompt: caption_prompt(self),
                response: self.caption(&image, vocab),
            }],
            TaskFamily::CountQa => vec![Turn {
                prompt: count_prompt(self),
                response: count_response(self),
            }],
            TaskFamily::CaptionThenCount => vec![
                Turn {
                    prompt: caption_prompt(self),
                    response: self.caption(&image, vocab),
                },
                Turn {
                    prompt: count_prompt(self),
                    response: count_response(self),
                },
            ],
        };
        let class = match self.family {
            TaskFamily::Caption | TaskFamily::CaptionThenCount => CorpusClass::Direct,
            TaskFamily::CountQa => CorpusClass::Reasoning,
        };
        ConversationExample {
            image: self.with_image.then_some(image),
            turns,
            class,
        }
    }
}

/// Disjoint train and eval corpora over distinct grids.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<ConversationExample>,
    pub eval: Vec<ConversationExample>,
    /// Grid index per example (train then eval), for split-hygiene checks.
    pub train_grids: Vec<usize>,
    pub eval_grids: Vec<usize>,
}

/// Deterministic corpus generation: sample `n_train + n_eval` distinct grids
/// by a seeded partial shuffle of the grid space, then split. The same seed
/// always yields byte-identical corpora.
pub fn make_corpus(
    task: &GridCaptionTask,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<CorpusSplit> {
    task.validate()?;
    let vocab = task.vocab()?;
    let space = task.grid_space();
    let needed = n_train + n_eval;
    if needed > space {
        return Err(Error::Validation(format!(
            "requested {needed} distinct grids but the space has only {space}"
        )));
    }
    let mut corpus_rng = rng::stream(seed, "corpus");
    let mut indices: Vec<usize> = (0..space).collect();
    for i in 0..needed {
        let j = corpus_rng.gen_range(i..space);
        indices.swap(i, j);
    }
    let build = |grids: &[usize], rng_name: &str| -> Vec<ConversationExample> {
        grids
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let mut ex_rng = rng::indexed_stream(seed, rng_name, i as u64);
                let query_color = ex_rng.gen_range(0..task.n_colors);
                task.example(task.decode_grid(g), &vocab, query_color)
            })
            .collect()
    };
    let train_grids = indices[..n_train].to_vec();
    let eval_grids = indices[n_train..needed].to_vec();
    Ok(CorpusSplit {
        train: build(&train_grids, "corpus/train"),
        eval: build(&eval_grids, "corpus/eval"),
        train_grids,
        eval_grids,
    })
}
