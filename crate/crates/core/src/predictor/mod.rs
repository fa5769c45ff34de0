//! The mask-predictor abstraction and its implementations.
//!
//! A predictor maps a corrupted layout (plus conditioning image and attention
//! matrix) to one categorical distribution per position. Two implementations:
//! [`TabularPredictor`], the exact Bayes conditional of an explicit joint for
//! oracle-grade testing, and [`ModelBundle`], the trainable tiny transformer
//! with vision stub and MLP projector.

mod bundle;
mod tabular;
mod tensor;
mod transformer;
mod vision;

pub use bundle::{GradientSet, LossItem, ModelBundle, ModelConfig};
pub use tabular::TabularPredictor;
pub use tensor::Tensor;
pub use transformer::{ForwardCache, TransformerParams};
pub use vision::{Projector, ProjectorParams, VisionStub};

use crate::conversation::{
    build_attention_mask, AttentionMaskKind, AttentionMatrix, Role, SequenceLayout, Slot,
    SyntheticImage,
};
use crate::vocab::TokenId;
use crate::{Error, Result};

/// Row-sum tolerance for prediction grids.
pub const GRID_ROW_TOL: f64 = 1e-6;

/// Everything a predictor sees: the corrupted token row, per-position role
/// and turn annotations, the conditioning image, positional indices, and the
/// attention matrix.
#[derive(Debug, Clone)]
pub struct PredictorInput {
    pub image: Option<SyntheticImage>,
    /// `None` at image positions and at masked positions.
    pub tokens: Vec<Option<TokenId>>,
    pub roles: Vec<Role>,
    pub turns: Vec<usize>,
    /// Positional-embedding indices; `0..len` unless a test permutes them.
    pub position_ids: Vec<usize>,
    pub attn: AttentionMatrix,
}

impl PredictorInput {
    /// Build the input for a layout under the given attention regime.
    pub fn from_layout(lay: &SequenceLayout, kind: AttentionMaskKind) -> Self {
        let tokens = lay
            .entries
            .iter()
            .map(|e| match e.slot {
                Slot::Token(t) => Some(t),
                Slot::Feature(_) | Slot::Masked => None,
            })
            .collect();
        Self {
            image: lay.image.clone(),
            tokens,
            roles: lay.entries.iter().map(|e| e.role).collect(),
            turns: lay.entries.iter().map(|e| e.turn).collect(),
            position_ids: (0..lay.total_length()).collect(),
            attn: build_attention_mask(lay, kind),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Masked positions outside the image block.
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.roles[i] != Role::Image && self.tokens[i].is_none())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.roles.len() != n
            || self.turns.len() != n
            || self.position_ids.len() != n
            || self.attn.size() != n
        {
            return Err(Error::Validation(format!(
                "input annotation lengths disagree with token row length {n}"
            )));
        }
        let image_positions = self.roles.iter().filter(|r| **r == Role::Image).count();
        let feature_count = self.image.as_ref().map_or(0, |img| img.feature_count());
        if image_positions != feature_count {
            return Err(Error::Validation(format!(
                "{image_positions} image positions but {feature_count} image features"
            )));
        }
        Ok(())
    }
}

/// Per-position categorical distributions over the prediction vocabulary.
///
/// Defined at every position; consumed only at masked ones.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub width: usize,
    pub rows: Vec<Vec<f64>>,
}

impl PredictionGrid {
    pub fn new(width: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let grid = Self { width, rows };
        grid.validate()?;
        Ok(grid)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.width {
                return Err(Error::Validation(format!(
                    "row {i} has width {}, expected {}",
                    row.len(),
                    self.width
                )));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Numeric(format!(
                    "row {i} has negative or non-finite probabilities"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > GRID_ROW_TOL {
                return Err(Error::Unnormalized {
                    sum,
                    tol: GRID_ROW_TOL,
                });
            }
        }
        Ok(())
    }
}

/// Masked layout in, per-position categorical distributions out.
pub trait MaskPredictor {
    /// Width of each output row (number of predictable token ids).
    fn output_width(&self) -> usize;

    /// Deterministic for fixed parameters and input.
    fn predict(&self, input: &PredictorInput) -> Result<PredictionGrid>;
}
