//! Desk-scale masked diffusion engine for multi-turn multimodal dialogue.
//!
//! The crate is organized around the life of a dialogue example:
//!
//! - [`diffusion`] — closed-form mathematics of the masked diffusion process:
//!   the linear noise schedule, forward corruption, and per-position reverse
//!   transitions.
//! - [`conversation`] — the multi-turn multimodal data model, flattened
//!   sequence layouts, response-only corruption, think-tag policy, and the
//!   three attention-mask builders.
//! - [`predictor`] — the mask-predictor abstraction with two implementations:
//!   an exact tabular conditional for oracle-grade testing and a tiny
//!   trainable bidirectional transformer with a vision stub and MLP projector.
//! - [`trainer`] — the Monte Carlo bound estimator, staged training with
//!   per-component learning rates, and momentum SGD.
//! - [`sampler`] — reverse-process generation with random or low-confidence
//!   remasking and multi-turn chat assembly.
//! - [`oracle`] — brute-force and closed-form references every stochastic
//!   component is checked against.
//! - [`harness`] — synthetic grid-caption tasks, evaluation metrics, and the
//!   ablation runner.
//!
//! Everything runs in double precision on the CPU and is deterministic under
//! a fixed root seed.

pub mod checkpoint;
pub mod conversation;
pub mod diffusion;
pub mod harness;
pub mod oracle;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod vocab;

mod error;

pub use error::{Error, Result};
