//! Deterministic vision featurizer and the trainable MLP projector.
//!
//! The stub maps an `H x W` integer grid to one feature vector per cell:
//! one-hot cell value concatenated with one-hot row and column indices. It is
//! parameterless and bit-exact by construction. The projector is the
//! randomly initialized two-layer MLP that carries those features into the
//! transformer's embedding space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::conversation::SyntheticImage;
use crate::{Error, Result};

/// Deterministic grid featurizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionStub {
    /// Number of distinct cell values (one-hot width of the value part).
    pub n_cell_values: usize,
    pub max_height: usize,
    pub max_width: usize,
}

impl VisionStub {
    pub fn feature_dim(&self) -> usize {
        self.n_cell_values + self.max_height + self.max_width
    }

    /// One feature vector per cell, reading order.
    pub fn encode_image(&self, image: &SyntheticImage) -> Result<Vec<Vec<f64>>> {
        if image.grid.len() > self.max_height {
            return Err(Error::Validation(format!(
                "grid height {} exceeds max {}",
                image.grid.len(),
                self.max_height
            )));
        }
        let mut features = Vec::with_capacity(image.feature_count());
        for (r, c, value) in image.cells() {
            if c >= self.max_width {
                return Err(Error::Validation(format!(
                    "grid width exceeds max {}",
                    self.max_width
                )));
            }
            if value as usize >= self.n_cell_values {
                return Err(Error::Validation(format!(
                    "cell id {value} out of range for {} cell values",
                    self.n_cell_values
                )));
            }
            let mut feat = vec![0.0; self.feature_dim()];
            feat[value as usize] = 1.0;
            feat[self.n_cell_values + r] = 1.0;
            feat[self.n_cell_values + self.max_height + c] = 1.0;
            features.push(feat);
        }
        Ok(features)
    }
}

/// Parameters of the two-layer projector MLP (`d_v -> d_h -> d`, tanh between).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub w1: Tensor, // d_v x d_h
    pub b1: Tensor, // 1 x d_h
    pub w2: Tensor, // d_h x d
    pub b2: Tensor, // 1 x d
}

impl ProjectorParams {
    pub fn init<R: Rng>(d_v: usize, d_h: usize, d: usize, scale: f64, rng: &mut R) -> Self {
        Self {
            w1: Tensor::uniform(d_v, d_h, scale, rng),
            b1: Tensor::zeros(1, d_h),
            w2: Tensor::uniform(d_h, d, scale, rng),
            b2: Tensor::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w1: self.w1.zeros_like(),
            b1: self.b1.zeros_like(),
            w2: self.w2.zeros_like(),
            b2: self.b2.zeros_like(),
        }
    }

    pub fn tensor_views(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("projector.w1".into(), &self.w1),
            ("projector.b1".into(), &self.b1),
            ("projector.w2".into(), &self.w2),
            ("projector.b2".into(), &self.b2),
        ]
    }

    pub fn tensor_views_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("projector.w1".into(), &mut self.w1),
            ("projector.b1".into(), &mut self.b1),
            ("projector.w2".into(), &mut self.w2),
            ("projector.b2".into(), &mut self.b2),
        ]
    }
}

/// Per-feature activations cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pub feat: Vec<f64>,
    pub hidden_act: Vec<f64>,
}

/// The projector as an operation over one feature vector.
#[derive(Debug, Clone)]
pub struct Projector;

impl Projector {
    /// `embedding = tanh(feat . w1 + b1) . w2 + b2`
    pub fn forward(params: &ProjectorParams, feat: &[f64]) -> (Vec<f64>, ProjectorCache) {
        let d_h = params.w1.cols;
        let d = params.w2.cols;
        let mut hidden = params.b1.data.clone();
        for (i, &x) in feat.iter().enumerate() {
            if x != 0.0 {
                let row = params.w1.row(i);
                for (h, &w) in hidden.iter_mut().zip(row) {
                    *h += x * w;
                }
            }
        }
        let hidden_act: Vec<f64> = hidden.iter().map(|h| h.tanh()).collect();
        let mut out = params.b2.data.clone();
        for i in 0..d_h {
            let a = hidden_act[i];
            if a != 0.0 {
                let row = params.w2.row(i);
                for j in 0..d {
                    out[j] += a * row[j];
                }
            }
        }
        (
            out,
            ProjectorCache {
                feat: feat.to_vec(),
                hidden_act,
            },
        )
    }

    /// Accumulate parameter gradients for one feature given `d_out`.
    pub fn backward(
        params: &ProjectorParams,
        cache: &ProjectorCache,
        d_out: &[f64],
        grads: &mut ProjectorParams,
    ) {
        let d_h = params.w1.cols;
        // d_out -> w2, b2, hidden activation
        let mut d_hidden_act = vec![0.0; d_h];
        for i in 0..d_h {
            let a = cache.hidden_act[i];
            let g_row = grads.w2.row_mut(i);
            let w_row = params.w2.row(i);
            let mut acc = 0.0;
            for (j, &dy) in d_out.iter().enumerate() {
                g_row[j] += a * dy;
                acc += dy * w_row[j];
            }
            d_hidden_act[i] = acc;
        }
        for (g, &dy) in grads.b2.data.iter_mut().zip(d_out) {
            *g += dy;
        }
        // tanh' = 1 - a^2
        let d_hidden: Vec<f64> = d_hidden_act
            .iter()
            .zip(&cache.hidden_act)
            .map(|(&da, &a)| da * (1.0 - a * a))
            .collect();
        for (i, &x) in cache.feat.iter().enumerate() {
            if x != 0.0 {
                let g_row = grads.w1.row_mut(i);
                for (g, &dh) in g_row.iter_mut().zip(&d_hidden) {
                    *g += x * dh;
                }
            }
        }
        for (g, &dh) in grads.b1.data.iter_mut().zip(&d_hidden) {
            *g += dh;
        }
    }
}
