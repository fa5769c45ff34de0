//! Synthetic task generation, metrics, and the experiment runner.

mod ablate;
mod eval;
pub mod stats;
mod task;

pub use ablate::{run_ablation, AblationCell, AblationSpec, AblationTable};
pub use eval::{evaluate, EvalConfig, EvalReport, TaskOraclePredictor};
pub use task::{make_corpus, CorpusSplit, GridCaptionTask, TaskFamily};
