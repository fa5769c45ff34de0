//! Evaluation: teacher-forced per-turn generation against ground truth.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conversation::{ConversationExample, Role};
use crate::predictor::{MaskPredictor, PredictionGrid, PredictorInput};
use crate::sampler::{generate_full, ChatState, SamplerConfig};
use crate::trainer::mc_loss;
use crate::vocab::{TokenId, Vocab};
use crate::{rng, Error, Result};

/// Evaluation settings. The sampler's `gen_length` is overridden per turn by
/// the ground-truth response length; `steps` larger than that clamp to it,
/// so `steps = usize::MAX` gives the S = L schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// Draws per example for the mean bound estimate.
    pub bound_draws: usize,
    pub bound_epsilon: f64,
    pub seed: u64,
}

/// Aggregate metrics over an eval corpus.
///
/// `exact_match` counts examples whose every generated response equals the
/// padded ground truth at every position. `token_accuracy` is the mean over
/// examples of their per-token accuracy, so exact match never exceeds it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub mean_bound: f64,
    pub n_examples: usize,
}

/// Evaluate a predictor over a corpus.
pub fn evaluate(
    predictor: &(dyn MaskPredictor + Sync),
    corpus: &[ConversationExample],
    vocab: &Vocab,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Validation("eval corpus is empty".into()));
    }
    for ex in corpus {
        ex.validate(vocab)?;
    }
    let per_example: Vec<Result<(bool, f64, f64)>> = corpus
        .par_iter()
        .enumerate()
        .map(|(idx, ex)| {
            let mut all_match = true;
            let mut correct = 0usize;
            let mut total = 0usize;
            for turn in 0..ex.turns.len() {
                let state = ChatState::from_example_turn(ex, turn)?;
                let truth = &ex.turns[turn].response;
                let turn_cfg = SamplerConfig {
                    gen_length: truth.len(),
                    seed: rng::derive_seed(cfg.seed, &format!("eval/{idx}/{turn}")),
                    ..cfg.sampler
                };
                let (generated, _) = generate_full(predictor, &state, &turn_cfg)?;
                total += truth.len();
                for (g, t) in generated.iter().zip(truth) {
                    if g == t {
                        correct += 1;
                    } else {
                        all_match = false;
                    }
                }
            }
            let mut bound_rng = rng::indexed_stream(cfg.seed, "eval/bound", idx as u64);
            let report = mc_loss(
                ex,
                predictor,
                cfg.sampler.attention,
                vocab,
                &mut bound_rng,
                cfg.bound_draws,
                cfg.bound_epsilon,
            )?;
            Ok((
                all_match,
                correct as f64 / total.max(1) as f64,
                report.objective,
            ))
        })
        .collect();

    let mut matches = 0usize;
    let mut acc_sum = 0.0;
    let mut bound_sum = 0.0;
    for r in per_example {
        let (m, acc, bound) = r?;
        if m {
            matches += 1;
        }
        acc_sum += acc;
        bound_sum += bound;
    }
    let n = corpus.len();
    Ok(EvalReport {
        exact_match: matches as f64 / n as f64,
        token_accuracy: acc_sum / n as f64,
        mean_bound: bound_sum / n as f64,
        n_examples: n,
    })
}

/// Oracle-grade reference model over a known corpus: looks the example up by
/// its image and prompt prefix and returns point-mass rows on the true
/// response tokens. Exact-match 1.0 by construction under any schedule.
pub struct TaskOraclePredictor {
    width: usize,
    responses: HashMap<Vec<u8>, Vec<TokenId>>,
}

impl TaskOraclePredictor {
    pub fn from_corpus(corpus: &[ConversationExample], vocab: &Vocab) -> Result<Self> {
        let mut responses = HashMap::new();
        for ex in corpus {
            for upto in 1..=ex.turns.len() {
                let prompts: Vec<TokenId> = ex.turns[..upto]
                    .iter()
                    .flat_map(|t| t.prompt.iter().copied())
                    .collect();
                let key = Self::key(&ex.image, &prompts)?;
                let value: Vec<TokenId> = ex.turns[..upto]
                    .iter()
                    .flat_map(|t| t.response.iter().copied())
                    .collect();
                responses.insert(key, value);
            }
        }
        Ok(Self {
            width: vocab.output_width(),
            responses,
        })
    }

    fn key(
        image: &Option<crate::conversation::SyntheticImage>,
        prompts: &[TokenId],
    ) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&(image, prompts))?)
    }
}

impl MaskPredictor for TaskOraclePredictor {
    fn output_width(&self) -> usize {
        self.width
    }

    fn predict(&self, input: &PredictorInput) -> Result<PredictionGrid> {
        input.validate()?;
        let prompts: Vec<TokenId> = (0..input.len())
            .filter(|&i| input.roles[i] == Role::Prompt)
            .map(|i| input.tokens[i].expect("prompt positions are never masked"))
            .collect();
        let key = Self::key(&input.image, &prompts)?;
        let truth = self.responses.get(&key).ok_or_else(|| {
            Error::Validation("input does not match any known example".into())
        })?;
        let response_positions: Vec<usize> = (0..input.len())
            .filter(|&i| input.roles[i] == Role::Response)
            .collect();
        if response_positions.len() != truth.len() {
            return Err(Error::Validation(format!(
                "layout has {} response positions, oracle knows {}",
                response_positions.len(),
                truth.len()
            )));
        }
        let filler = vec![1.0 / self.width as f64; self.width];
        let mut rows = vec![filler; input.len()];
        for (&pos, &tok) in response_positions.iter().zip(truth) {
            let mut row = vec![0.0; self.width];
            row[tok as usize] = 1.0;
            rows[pos] = row;
        }
        PredictionGrid::new(self.width, rows)
    }
}
