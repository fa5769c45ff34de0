//! Exact tabular conditional over an explicit joint distribution.
//!
//! The reference model for oracle tests: it stores the full joint over all
//! `width^n` response sequences and answers mask queries with the exact Bayes
//! conditional, marginalizing over the other masked positions. It ignores
//! image and prompt conditioning entirely — its whole state is the joint.

use rand::Rng;

use super::{MaskPredictor, PredictionGrid, PredictorInput};
use crate::conversation::Role;
use crate::vocab::TokenId;
use crate::{Error, Result};

/// Largest joint table we are willing to hold (`width^n` entries).
const MAX_JOINT: usize = 1 << 22;

#[derive(Debug, Clone)]
pub struct TabularPredictor {
    n: usize,
    width: usize,
    joint: Vec<f64>,
}

impl TabularPredictor {
    /// Joint over `width^n` sequences, indexed big-endian by token
    /// (`index = sum_i tok_i * width^(n-1-i)`). Must sum to 1 within 1e-9.
    pub fn new(n: usize, width: usize, joint: Vec<f64>) -> Result<Self> {
        let expected = width
            .checked_pow(n as u32)
            .filter(|&e| e <= MAX_JOINT)
            .ok_or_else(|| Error::TooLarge(format!("joint of size {width}^{n}")))?;
        if joint.len() != expected {
            return Err(Error::Validation(format!(
                "joint has {} entries, expected {expected}",
                joint.len()
            )));
        }
        crate::diffusion::check_distribution(&joint, 1e-9)?;
        Ok(Self { n, width, joint })
    }

    /// Point mass on one sequence.
    pub fn point_mass(seq: &[TokenId], width: usize) -> Result<Self> {
        let n = seq.len();
        let size = width
            .checked_pow(n as u32)
            .filter(|&e| e <= MAX_JOINT)
            .ok_or_else(|| Error::TooLarge(format!("joint of size {width}^{n}")))?;
        let mut joint = vec![0.0; size];
        let mut idx = 0usize;
        for &tok in seq {
            if tok as usize >= width {
                return Err(Error::Validation(format!(
                    "token {tok} out of range for width {width}"
                )));
            }
            idx = idx * width + tok as usize;
        }
        joint[idx] = 1.0;
        Self::new(n, width, joint)
    }

    /// Uniform joint.
    pub fn uniform(n: usize, width: usize) -> Result<Self> {
        let size = width
            .checked_pow(n as u32)
            .filter(|&e| e <= MAX_JOINT)
            .ok_or_else(|| Error::TooLarge(format!("joint of size {width}^{n}")))?;
        Self::new(n, width, vec![1.0 / size as f64; size])
    }

    /// Random strictly-positive joint (normalized exponentials).
    pub fn random<R: Rng>(n: usize, width: usize, rng: &mut R) -> Result<Self> {
        let size = width
            .checked_pow(n as u32)
            .filter(|&e| e <= MAX_JOINT)
            .ok_or_else(|| Error::TooLarge(format!("joint of size {width}^{n}")))?;
        let raw: Vec<f64> = (0..size).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        Self::new(n, width, raw.into_iter().map(|w| w / total).collect())
    }

    pub fn sequence_len(&self) -> usize {
        self.n
    }

    /// Decode joint index `idx` into its token sequence.
    fn decode(&self, mut idx: usize) -> Vec<usize> {
        let mut seq = vec![0usize; self.n];
        for slot in seq.iter_mut().rev() {
            *slot = idx % self.width;
            idx /= self.width;
        }
        seq
    }

    /// Exact conditional rows for a mask pattern: masked positions get
    /// `P(x_i | observed)`, observed positions a point mass on their token.
    pub fn conditional(&self, pattern: &[Option<TokenId>]) -> Result<Vec<Vec<f64>>> {
        if pattern.len() != self.n {
            return Err(Error::Validation(format!(
                "pattern length {} does not match joint dimension {}",
                pattern.len(),
                self.n
            )));
        }
        for tok in pattern.iter().flatten() {
            if *tok as usize >= self.width {
                return Err(Error::Validation(format!(
                    "observed token {tok} out of range for width {}",
                    self.width
                )));
            }
        }
        let mut mass = vec![vec![0.0; self.width]; self.n];
        let mut total = 0.0;
        for (idx, &w) in self.joint.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let seq = self.decode(idx);
            let consistent = pattern
                .iter()
                .zip(&seq)
                .all(|(obs, &tok)| obs.map_or(true, |o| o as usize == tok));
            if !consistent {
                continue;
            }
            total += w;
            for (i, &tok) in seq.iter().enumerate() {
                mass[i][tok] += w;
            }
        }
        if total <= 0.0 {
            return Err(Error::ImpossibleCondition(format!(
                "observed pattern {pattern:?} has zero probability under the joint"
            )));
        }
        let rows = mass
            .into_iter()
            .enumerate()
            .map(|(i, row)| match pattern[i] {
                Some(tok) => {
                    let mut point = vec![0.0; self.width];
                    point[tok as usize] = 1.0;
                    point
                }
                None => row.into_iter().map(|m| m / total).collect(),
            })
            .collect();
        Ok(rows)
    }
}

impl MaskPredictor for TabularPredictor {
    fn output_width(&self) -> usize {
        self.width
    }

    /// Conditions on the response positions only; prompt and image positions
    /// get uniform filler rows (defined but never consumed).
    fn predict(&self, input: &PredictorInput) -> Result<PredictionGrid> {
        input.validate()?;
        let response_positions: Vec<usize> = (0..input.len())
            .filter(|&i| input.roles[i] == Role::Response)
            .collect();
        if response_positions.len() != self.n {
            return Err(Error::Validation(format!(
                "layout has {} response positions, joint dimension is {}",
                response_positions.len(),
                self.n
            )));
        }
        let pattern: Vec<Option<TokenId>> = response_positions
            .iter()
            .map(|&i| input.tokens[i])
            .collect();
        let cond = self.conditional(&pattern)?;
        let filler = vec![1.0 / self.width as f64; self.width];
        let mut rows = vec![filler; input.len()];
        for (row, &pos) in cond.into_iter().zip(&response_positions) {
            rows[pos] = row;
        }
        PredictionGrid::new(self.width, rows)
    }
}
