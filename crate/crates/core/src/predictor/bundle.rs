//! The trainable model bundle: vision stub + projector + transformer.
//!
//! The stub featurizes the grid (no parameters), the projector carries
//! features into the embedding space, and the transformer predicts every
//! masked position. Gradients flow through both trainable components;
//! the two form the `projector` and `language` parameter groups.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use super::transformer::{self, ForwardCache, TransformerParams};
use super::vision::{Projector, ProjectorCache, ProjectorParams, VisionStub};
use super::{MaskPredictor, PredictionGrid, PredictorInput};
use crate::vocab::{TokenId, Vocab};
use crate::{Error, Result};

/// Bundle hyperparameters. The defaults are the smallest configuration that
/// fits the synthetic tasks while keeping finite-difference checks fast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: Vocab,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub d_proj_hidden: usize,
    pub stub: VisionStub,
}

impl ModelConfig {
    pub fn tiny(vocab: Vocab, stub: VisionStub) -> Self {
        Self {
            vocab,
            d_model: 64,
            n_heads: 2,
            n_blocks: 2,
            d_ff: 256,
            max_len: 64,
            d_proj_hidden: 64,
            stub,
        }
    }
}

/// Parameter initialization scale (uniform in `[-INIT_SCALE, INIT_SCALE]`).
pub const INIT_SCALE: f64 = 0.02;

/// One loss term: a corrupted input, the positions to score, and their true
/// tokens with per-position weights (the `1/t` bound weight).
#[derive(Debug, Clone)]
pub struct LossItem {
    pub input: PredictorInput,
    /// `(position, true token id, weight)` per masked response position.
    pub targets: Vec<(usize, TokenId, f64)>,
}

/// Gradients for the two trainable groups, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub language: TransformerParams,
    pub projector: ProjectorParams,
}

impl GradientSet {
    pub fn zeros_of(bundle: &ModelBundle) -> Self {
        Self {
            language: bundle.language.zeros_like(),
            projector: bundle.projector.zeros_like(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for ((_, a), (_, b)) in self
            .language
            .tensor_views_mut()
            .into_iter()
            .zip(other.language.tensor_views())
        {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        for ((_, a), (_, b)) in self
            .projector
            .tensor_views_mut()
            .into_iter()
            .zip(other.projector.tensor_views())
        {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.language.tensor_views_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
        for (_, t) in self.projector.tensor_views_mut() {
            for x in t.data.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.language.tensor_views().iter().all(|(_, t)| t.is_finite())
            && self
                .projector
                .tensor_views()
                .iter()
                .all(|(_, t)| t.is_finite())
    }
}

/// The trainable mask predictor.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub cfg: ModelConfig,
    pub language: TransformerParams,
    pub projector: ProjectorParams,
}

impl ModelBundle {
    /// Initialize all parameters uniformly in `[-0.02, 0.02]` from the given
    /// generator (layer-norm gains start at 1, biases at 0).
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        let language = TransformerParams::init(
            cfg.vocab.total(),
            cfg.vocab.output_width(),
            cfg.vocab.mask() as usize,
            cfg.d_model,
            cfg.n_heads,
            cfg.n_blocks,
            cfg.d_ff,
            cfg.max_len,
            INIT_SCALE,
            rng,
        )?;
        let projector = ProjectorParams::init(
            cfg.stub.feature_dim(),
            cfg.d_proj_hidden,
            cfg.d_model,
            INIT_SCALE,
            rng,
        );
        Ok(Self {
            cfg,
            language,
            projector,
        })
    }

    /// Projector embeddings (and caches) for the input's image, if any.
    fn project_image(
        &self,
        input: &PredictorInput,
    ) -> Result<(Vec<Vec<f64>>, Vec<ProjectorCache>)> {
        let Some(image) = &input.image else {
            return Ok((Vec::new(), Vec::new()));
        };
        let features = self.cfg.stub.encode_image(image)?;
        let mut embeds = Vec::with_capacity(features.len());
        let mut caches = Vec::with_capacity(features.len());
        for feat in &features {
            let (e, c) = Projector::forward(&self.projector, feat);
            embeds.push(e);
            caches.push(c);
        }
        Ok((embeds, caches))
    }

    /// Forward pass returning the prediction grid and cached activations.
    pub fn forward_with_params(
        &self,
        input: &PredictorInput,
    ) -> Result<(PredictionGrid, ForwardCache)> {
        let (embeds, _) = self.project_image(input)?;
        transformer::forward(&self.language, input, &embeds)
    }

    /// Loss of one item without gradient bookkeeping.
    pub fn loss_only(&self, item: &LossItem) -> Result<f64> {
        let (_, cache) = self.forward_with_params(&item.input)?;
        let targets = self.checked_targets(item)?;
        Ok(transformer::loss_from_cache(
            &cache,
            self.cfg.vocab.output_width(),
            &targets,
        ))
    }

    fn checked_targets(&self, item: &LossItem) -> Result<Vec<(usize, usize, f64)>> {
        let width = self.cfg.vocab.output_width();
        item.targets
            .iter()
            .map(|&(pos, tok, w)| {
                if pos >= item.input.len() {
                    return Err(Error::Validation(format!(
                        "target position {pos} outside input of length {}",
                        item.input.len()
                    )));
                }
                if tok as usize >= width {
                    return Err(Error::Validation(format!(
                        "target token {tok} outside prediction width {width}"
                    )));
                }
                Ok((pos, tok as usize, w))
            })
            .collect()
    }

    /// Loss and parameter gradients for one item.
    pub fn loss_and_grads(&self, item: &LossItem) -> Result<(f64, GradientSet)> {
        let (embeds, proj_caches) = self.project_image(&item.input)?;
        let (_, cache) = transformer::forward(&self.language, &item.input, &embeds)?;
        let targets = self.checked_targets(item)?;
        let loss =
            transformer::loss_from_cache(&cache, self.cfg.vocab.output_width(), &targets);
        let mut grads = GradientSet::zeros_of(self);
        let d_image = transformer::backward(
            &self.language,
            &item.input,
            &cache,
            &targets,
            &mut grads.language,
        );
        for (cache, d_out) in proj_caches.iter().zip(&d_image) {
            Projector::backward(&self.projector, cache, d_out, &mut grads.projector);
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numeric("non-finite loss or gradients".into()));
        }
        Ok((loss, grads))
    }

    /// SHA-256 over the language-group tensors (little-endian f64 bytes).
    pub fn language_checksum(&self) -> String {
        checksum(self.language.tensor_views())
    }

    /// SHA-256 over the projector-group tensors.
    pub fn projector_checksum(&self) -> String {
        checksum(self.projector.tensor_views())
    }
}

fn checksum(views: Vec<(String, &Tensor)>) -> String {
    let mut hasher = Sha256::new();
    for (name, tensor) in views {
        hasher.update(name.as_bytes());
        for v in &tensor.data {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl MaskPredictor for ModelBundle {
    fn output_width(&self) -> usize {
        self.cfg.vocab.output_width()
    }

    fn predict(&self, input: &PredictorInput) -> Result<PredictionGrid> {
        Ok(self.forward_with_params(input)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conversation::{
        layout, AttentionMaskKind, AttentionMatrix, ConversationExample, CorpusClass, Slot,
        SyntheticImage, Turn,
    };
    use crate::rng::{indexed_stream, stream};
    use rand::Rng;

    fn test_cfg(d_model: usize, n_blocks: usize) -> ModelConfig {
        ModelConfig {
            vocab: Vocab::new(6).unwrap(),
            d_model,
            n_heads: 2,
            n_blocks,
            d_ff: 2 * d_model,
            max_len: 32,
            d_proj_hidden: d_model,
            stub: VisionStub {
                n_cell_values: 4,
                max_height: 2,
                max_width: 2,
            },
        }
    }

    fn example_with_image() -> ConversationExample {
        ConversationExample {
            image: Some(SyntheticImage {
                grid: vec![vec![0, 3], vec![1, 2]],
            }),
            turns: vec![Turn {
                prompt: vec![0, 2],
                response: vec![1, 3, 5],
            }],
            class: CorpusClass::Direct,
        }
    }

    fn masked_item(bundle: &ModelBundle, mask_all: bool) -> LossItem {
        let ex = example_with_image();
        let mut lay = layout(&ex).unwrap();
        let resp = lay.response_positions();
        let mut targets = Vec::new();
        for (k, &pos) in resp.iter().enumerate() {
            if mask_all || k % 2 == 0 {
                let tok = lay.token_at(pos).unwrap();
                lay.entries[pos].slot = Slot::Masked;
                targets.push((pos, tok, 1.0 / 0.6));
            }
        }
        let _ = bundle;
        LossItem {
            input: PredictorInput::from_layout(&lay, AttentionMaskKind::NoMask),
            targets,
        }
    }

    #[test]
    fn grids_are_row_stochastic() {
        let bundle = ModelBundle::init(test_cfg(16, 2), &mut stream(1, "init")).unwrap();
        let item = masked_item(&bundle, true);
        let grid = bundle.predict(&item.input).unwrap();
        grid.validate().unwrap();
    }

    #[test]
    fn self_only_attention_localizes_outputs() {
        // With attention restricted to the diagonal, perturbing any other
        // position leaves a position's output row unchanged.
        let bundle = ModelBundle::init(test_cfg(16, 2), &mut stream(2, "init")).unwrap();
        let ex = example_with_image();
        let lay = layout(&ex).unwrap();
        let mut input = PredictorInput::from_layout(&lay, AttentionMaskKind::NoMask);
        input.attn = AttentionMatrix::from_fn(input.len(), |q, k| q == k);
        let base = bundle.predict(&input).unwrap();
        let probe = input.len() - 1;
        let mut changed = input.clone();
        changed.tokens[probe] = Some(4);
        let out = bundle.predict(&changed).unwrap();
        for pos in 0..probe {
            assert_eq!(base.rows[pos], out.rows[pos], "row {pos} moved");
        }
        assert_ne!(base.rows[probe], out.rows[probe]);
    }

    #[test]
    fn single_turn_text_dialogue_causal_equals_no_mask() {
        let bundle = ModelBundle::init(test_cfg(16, 2), &mut stream(3, "init")).unwrap();
        let ex = ConversationExample {
            image: None,
            turns: vec![Turn {
                prompt: vec![0, 2],
                response: vec![1, 3],
            }],
            class: CorpusClass::Direct,
        };
        let lay = layout(&ex).unwrap();
        let a = bundle
            .predict(&PredictorInput::from_layout(&lay, AttentionMaskKind::NoMask))
            .unwrap();
        let b = bundle
            .predict(&PredictorInput::from_layout(
                &lay,
                AttentionMaskKind::DialogueCausal,
            ))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blocked_key_changes_do_not_leak() {
        // Under CAUSAL attention, changing the token at the last position
        // cannot move any earlier row (exact equality).
        let bundle = ModelBundle::init(test_cfg(16, 2), &mut stream(4, "init")).unwrap();
        let ex = example_with_image();
        let lay = layout(&ex).unwrap();
        let input = PredictorInput::from_layout(&lay, AttentionMaskKind::Causal);
        let last = input.len() - 1;
        let base = bundle.predict(&input).unwrap();
        let mut changed = input.clone();
        changed.tokens[last] = Some(0);
        let out = bundle.predict(&changed).unwrap();
        for pos in 0..last {
            assert_eq!(base.rows[pos], out.rows[pos]);
        }
    }

    #[test]
    fn permuting_tokens_with_positions_permutes_outputs() {
        // Swap two response positions' tokens together with their positional
        // indices under NO_MASK: output rows swap (up to key-order rounding).
        let bundle = ModelBundle::init(test_cfg(16, 2), &mut stream(5, "init")).unwrap();
        let ex = example_with_image();
        let lay = layout(&ex).unwrap();
        let input = PredictorInput::from_layout(&lay, AttentionMaskKind::NoMask);
        let n = input.len();
        let (a, b) = (n - 2, n - 1); // two response positions
        let base = bundle.predict(&input).unwrap();

        let mut permuted = input.clone();
        permuted.tokens.swap(a, b);
        permuted.position_ids.swap(a, b);
        permuted.roles.swap(a, b);
        permuted.turns.swap(a, b);
        let out = bundle.predict(&permuted).unwrap();
        for j in 0..bundle.output_width() {
            assert!((out.rows[a][j] - base.rows[b][j]).abs() < 1e-12);
            assert!((out.rows[b][j] - base.rows[a][j]).abs() < 1e-12);
        }
        for pos in 0..n - 2 {
            for j in 0..bundle.output_width() {
                assert!((out.rows[pos][j] - base.rows[pos][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // d=16, 1 block, image-conditioned item; checks a spread of
        // coordinates in every tensor of both groups.
        let mut bundle = ModelBundle::init(test_cfg(16, 1), &mut stream(6, "init")).unwrap();
        let item = masked_item(&bundle, false);
        let (_, grads) = bundle.loss_and_grads(&item).unwrap();
        let h = 1e-4;
        let mut rng = stream(7, "fd");
        let mut checked = 0;
        for group in 0..2 {
            let n_tensors = if group == 0 {
                grads.language.tensor_views().len()
            } else {
                grads.projector.tensor_views().len()
            };
            for ti in 0..n_tensors {
                let len = if group == 0 {
                    grads.language.tensor_views()[ti].1.len()
                } else {
                    grads.projector.tensor_views()[ti].1.len()
                };
                for _ in 0..2 {
                    let idx = rng.gen_range(0..len);
                    let analytic = if group == 0 {
                        grads.language.tensor_views()[ti].1.data[idx]
                    } else {
                        grads.projector.tensor_views()[ti].1.data[idx]
                    };
                    let perturb = |bundle: &mut ModelBundle, delta: f64| {
                        if group == 0 {
                            bundle.language.tensor_views_mut()[ti].1.data[idx] += delta;
                        } else {
                            bundle.projector.tensor_views_mut()[ti].1.data[idx] += delta;
                        }
                    };
                    perturb(&mut bundle, h);
                    let plus = bundle.loss_only(&item).unwrap();
                    perturb(&mut bundle, -2.0 * h);
                    let minus = bundle.loss_only(&item).unwrap();
                    perturb(&mut bundle, h);
                    let numeric = (plus - minus) / (2.0 * h);
                    let rel = (analytic - numeric).abs()
                        / f64::max(1e-6, analytic.abs().max(numeric.abs()));
                    assert!(
                        rel <= 1e-4,
                        "group {group} tensor {ti} coord {idx}: {analytic} vs {numeric} (rel {rel})"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked >= 40);
    }

    #[test]
    fn zero_masked_positions_give_zero_gradients() {
        let bundle = ModelBundle::init(test_cfg(16, 1), &mut stream(8, "init")).unwrap();
        let ex = example_with_image();
        let lay = layout(&ex).unwrap();
        let item = LossItem {
            input: PredictorInput::from_layout(&lay, AttentionMaskKind::NoMask),
            targets: Vec::new(),
        };
        let (loss, grads) = bundle.loss_and_grads(&item).unwrap();
        assert_eq!(loss, 0.0);
        for (_, t) in grads.language.tensor_views() {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
        for (_, t) in grads.projector.tensor_views() {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicated_item_doubles_the_gradient_exactly() {
        let bundle = ModelBundle::init(test_cfg(16, 1), &mut stream(9, "init")).unwrap();
        let item = masked_item(&bundle, true);
        let (loss, g1) = bundle.loss_and_grads(&item).unwrap();
        let mut g2 = GradientSet::zeros_of(&bundle);
        g2.add_assign(&g1);
        g2.add_assign(&g1);
        // Accumulating the same example twice is exactly 2x per coordinate.
        for ((_, a), (_, b)) in g1
            .language
            .tensor_views()
            .into_iter()
            .zip(g2.language.tensor_views())
        {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(2.0 * x, *y);
            }
        }
        assert!(loss > 0.0);
    }

    #[test]
    fn non_finite_parameters_surface_a_numeric_error() {
        let mut bundle = ModelBundle::init(test_cfg(16, 1), &mut stream(10, "init")).unwrap();
        bundle.language.out_w.data[0] = f64::INFINITY;
        let item = masked_item(&bundle, true);
        assert!(matches!(
            bundle.loss_and_grads(&item),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn forward_is_deterministic_for_fixed_parameters() {
        let bundle = ModelBundle::init(test_cfg(16, 2), &mut stream(11, "init")).unwrap();
        let item = masked_item(&bundle, true);
        let a = bundle.predict(&item.input).unwrap();
        let b = bundle.predict(&item.input).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            for (x, y) in ra.iter().zip(rb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn checksums_separate_the_two_groups() {
        let bundle = ModelBundle::init(test_cfg(16, 1), &mut stream(12, "init")).unwrap();
        let mut other = bundle.clone();
        other.projector.w1.data[0] += 1.0;
        assert_eq!(bundle.language_checksum(), other.language_checksum());
        assert_ne!(bundle.projector_checksum(), other.projector_checksum());
        let mut third = bundle.clone();
        third.language.tok_emb.data[0] += 1.0;
        assert_ne!(bundle.language_checksum(), third.language_checksum());
        let _ = indexed_stream(0, "unused", 0);
    }
}
