//! Ablation runner: train one model per cell with identical data order and
//! seeds, differing only in the ablated factor, and report side by side.

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalConfig, EvalReport};
use crate::conversation::{AttentionMaskKind, ConversationExample};
use crate::predictor::{ModelBundle, ModelConfig};
use crate::sampler::RemaskStrategy;
use crate::trainer::{train_stage, TrainConfig};
use crate::vocab::Vocab;
use crate::{rng, Result};

/// What to ablate. Empty lists keep the base config's single value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub attention_kinds: Vec<AttentionMaskKind>,
    pub strategies: Vec<RemaskStrategy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub attention: AttentionMaskKind,
    pub strategy: RemaskStrategy,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Side-by-side CSV, one row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attention,strategy,exact_match,token_accuracy,mean_bound\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{:?},{:?},{:.6},{:.6},{:.6}\n",
                c.attention, c.strategy, c.report.exact_match, c.report.token_accuracy,
                c.report.mean_bound
            ));
        }
        out
    }
}

/// Train and evaluate one model per (attention, strategy) cell.
///
/// Every cell initializes from the same seed and visits the data in the same
/// order; only the ablated factor differs, so single-turn control corpora
/// yield bit-identical cells for attention regimes that coincide there.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    spec: &AblationSpec,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    train_corpus: &[ConversationExample],
    eval_corpus: &[ConversationExample],
    vocab: &Vocab,
) -> Result<AblationTable> {
    let attention_kinds = if spec.attention_kinds.is_empty() {
        vec![train_cfg.attention]
    } else {
        spec.attention_kinds.clone()
    };
    let strategies = if spec.strategies.is_empty() {
        vec![eval_cfg.sampler.strategy]
    } else {
        spec.strategies.clone()
    };

    let mut cells = Vec::new();
    for &attention in &attention_kinds {
        let cell_train = TrainConfig {
            attention,
            ..train_cfg.clone()
        };
        let mut init_rng = rng::stream(cell_train.seed, "init");
        let bundle = ModelBundle::init(model_cfg, &mut init_rng)?;
        let (trained, _) = train_stage(&cell_train, bundle, train_corpus, vocab)?;
        for &strategy in &strategies {
            let mut cell_eval = *eval_cfg;
            cell_eval.sampler.attention = attention;
            cell_eval.sampler.strategy = strategy;
            let report = evaluate(&trained, eval_corpus, vocab, &cell_eval)?;
            cells.push(AblationCell {
                attention,
                strategy,
                report,
            });
        }
    }
    Ok(AblationTable { cells })
}
