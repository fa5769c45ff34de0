//! Closed-form mathematics of the masked diffusion process.
//!
//! The forward process independently replaces each token with `MASK` at
//! probability `1 - alpha(t)`; under the linear schedule `alpha(t) = 1 - t`
//! that probability is exactly `t`. The reverse transition from noise level
//! `t` to `s < t` keeps a masked position masked with probability `s/t` and
//! otherwise resolves it from the predictor's distribution. Positions that
//! already hold a token carry over unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::vocab::TokenId;
use crate::{Error, Result};

/// Tolerance for validating that a categorical distribution sums to 1.
pub const DIST_SUM_TOL: f64 = 1e-9;

/// Noise schedule for the forward process.
///
/// Only the linear schedule is implemented; the enum exists so other
/// absorbing-state schedules can slot in without touching call sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseSchedule {
    /// `alpha(t) = 1 - t`.
    #[default]
    Linear,
}

impl NoiseSchedule {
    /// Probability that a token survives unmasked at noise level `t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_noise_level(t)?;
        match self {
            NoiseSchedule::Linear => Ok(1.0 - t),
        }
    }
}

pub(crate) fn check_noise_level(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::NoiseLevelOutOfRange(t));
    }
    Ok(())
}

/// A clean token sequence over a content vocabulary of size `vocab_size`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<TokenId>,
    pub vocab_size: usize,
}

impl Sequence {
    pub fn new(tokens: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Validation(format!(
                "vocab size must be >= 2, got {vocab_size}"
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&tok| tok as usize >= vocab_size) {
            return Err(Error::Validation(format!(
                "token {bad} out of range for vocab size {vocab_size}"
            )));
        }
        Ok(Self { tokens, vocab_size })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A sequence in which each position is either a token or `MASK`.
///
/// `None` entries are masked. `noise_level` records the `t` the sequence was
/// produced at (1.0 for fully-masked initializations).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub entries: Vec<Option<TokenId>>,
    pub vocab_size: usize,
    pub noise_level: f64,
}

impl MaskedSequence {
    pub fn new(entries: Vec<Option<TokenId>>, vocab_size: usize, noise_level: f64) -> Result<Self> {
        check_noise_level(noise_level)?;
        if let Some(bad) = entries
            .iter()
            .flatten()
            .find(|&&tok| tok as usize >= vocab_size)
        {
            return Err(Error::Validation(format!(
                "token {bad} out of range for vocab size {vocab_size}"
            )));
        }
        Ok(Self {
            entries,
            vocab_size,
            noise_level,
        })
    }

    /// Fully-masked sequence of length `len`, i.e. the reverse-process start.
    pub fn fully_masked(len: usize, vocab_size: usize) -> Self {
        Self {
            entries: vec![None; len],
            vocab_size,
            noise_level: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mask_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_none()).count()
    }

    /// Positions still masked, in order.
    pub fn masked_positions(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.is_none().then_some(i))
            .collect()
    }
}

/// Forward corruption: independently mask each token with probability `t`.
pub fn forward_mask<R: Rng>(x0: &Sequence, t: f64, rng: &mut R) -> Result<MaskedSequence> {
    check_noise_level(t)?;
    let entries = x0
        .tokens
        .iter()
        .map(|&tok| if rng.gen::<f64>() < t { None } else { Some(tok) })
        .collect();
    MaskedSequence::new(entries, x0.vocab_size, t)
}

/// Per-position reverse transition law for one masked position.
///
/// `stay_mask` is the probability the position remains masked; `resolve[v]`
/// the probability it resolves to token `v`. Non-masked positions are not
/// handled here — their contract is identity (see [`reverse_step`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseTransition {
    pub stay_mask: f64,
    pub resolve: Vec<f64>,
}

impl ReverseTransition {
    pub fn total_mass(&self) -> f64 {
        self.stay_mask + self.resolve.iter().sum::<f64>()
    }
}

pub(crate) fn check_distribution(predicted: &[f64], tol: f64) -> Result<()> {
    if predicted.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Numeric(
            "distribution has negative or non-finite entries".into(),
        ));
    }
    let sum: f64 = predicted.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::Unnormalized { sum, tol });
    }
    Ok(())
}

/// Reverse transition from noise level `t` to `s` for a masked position,
/// given the predictor's distribution over tokens.
///
/// Under the linear schedule: stay masked with probability `s/t`, resolve to
/// token `v` with probability `(1 - s/t) * predicted[v]`.
pub fn reverse_transition(t: f64, s: f64, predicted: &[f64]) -> Result<ReverseTransition> {
    check_noise_level(t)?;
    check_noise_level(s)?;
    if s >= t {
        return Err(Error::InvalidTimePair { t, s });
    }
    check_distribution(predicted, DIST_SUM_TOL)?;
    let stay = s / t;
    let resolve = predicted.iter().map(|p| (1.0 - stay) * p).collect();
    Ok(ReverseTransition {
        stay_mask: stay,
        resolve,
    })
}

/// Sample an index from an explicit categorical by inverse CDF over the fixed
/// token ordering. The final index absorbs any rounding slack.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    debug_assert!(!probs.is_empty());
    let mut dart = rng.gen::<f64>() * probs.iter().sum::<f64>();
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Apply one reverse step to a whole sequence: masked positions follow
/// [`reverse_transition`] with their row of `predicted`; non-masked positions
/// carry over bit-identically.
///
/// `predicted[i]` is the distribution for position `i` (rows at non-masked
/// positions are ignored).
pub fn reverse_step<R: Rng>(
    seq: &MaskedSequence,
    s: f64,
    predicted: &[Vec<f64>],
    rng: &mut R,
) -> Result<MaskedSequence> {
    let t = seq.noise_level;
    if predicted.len() != seq.len() {
        return Err(Error::Validation(format!(
            "predicted rows {} != sequence length {}",
            predicted.len(),
            seq.len()
        )));
    }
    let mut entries = Vec::with_capacity(seq.len());
    for (entry, row) in seq.entries.iter().zip(predicted) {
        match entry {
            Some(tok) => entries.push(Some(*tok)),
            None => {
                let law = reverse_transition(t, s, row)?;
                if rng.gen::<f64>() < law.stay_mask {
                    entries.push(None);
                } else {
                    entries.push(Some(sample_categorical(row, rng) as TokenId));
                }
            }
        }
    }
    MaskedSequence::new(entries, seq.vocab_size, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn alpha_linear_boundaries_and_interior() {
        let sched = NoiseSchedule::Linear;
        assert_eq!(sched.alpha(0.0).unwrap(), 1.0);
        assert_eq!(sched.alpha(1.0).unwrap(), 0.0);
        assert_eq!(sched.alpha(0.25).unwrap(), 0.75);
    }

    #[test]
    fn alpha_rejects_out_of_domain() {
        let sched = NoiseSchedule::Linear;
        assert!(matches!(
            sched.alpha(-0.1),
            Err(Error::NoiseLevelOutOfRange(_))
        ));
        assert!(matches!(
            sched.alpha(1.5),
            Err(Error::NoiseLevelOutOfRange(_))
        ));
        assert!(sched.alpha(f64::NAN).is_err());
    }

    #[test]
    fn alpha_strictly_decreasing() {
        let sched = NoiseSchedule::Linear;
        let mut prev = sched.alpha(0.0).unwrap();
        for k in 1..=100 {
            let a = sched.alpha(k as f64 / 100.0).unwrap();
            assert!(a < prev);
            assert!((0.0..=1.0).contains(&a));
            prev = a;
        }
    }

    #[test]
    fn forward_mask_identity_at_zero() {
        let x0 = Sequence::new(vec![0, 1, 2, 1], 3).unwrap();
        let mut rng = stream(1, "test");
        let xt = forward_mask(&x0, 0.0, &mut rng).unwrap();
        assert_eq!(xt.mask_count(), 0);
        let tokens: Vec<_> = xt.entries.iter().map(|e| e.unwrap()).collect();
        assert_eq!(tokens, x0.tokens);
        assert_eq!(xt.noise_level, 0.0);
    }

    #[test]
    fn forward_mask_full_corruption_at_one() {
        let x0 = Sequence::new(vec![0, 1, 2, 1], 3).unwrap();
        let mut rng = stream(2, "test");
        let xt = forward_mask(&x0, 1.0, &mut rng).unwrap();
        assert_eq!(xt.mask_count(), 4);
    }

    #[test]
    fn forward_mask_marginal_matches_t() {
        // Per-position empirical mask frequency against the analytic marginal.
        let x0 = Sequence::new(vec![1; 8], 3).unwrap();
        let mut rng = stream(3, "test");
        let t = 0.3;
        let draws = 20_000;
        let mut masked = vec![0usize; 8];
        for _ in 0..draws {
            let xt = forward_mask(&x0, t, &mut rng).unwrap();
            for (count, entry) in masked.iter_mut().zip(&xt.entries) {
                if entry.is_none() {
                    *count += 1;
                }
            }
        }
        for count in masked {
            let freq = count as f64 / draws as f64;
            // 5 sigma band for Bernoulli(0.3) over 20k draws.
            assert!((freq - t).abs() < 5.0 * (t * (1.0 - t) / draws as f64).sqrt());
        }
    }

    #[test]
    fn monotone_corruption_on_analytic_marginal() {
        // Expected mask count is N*t under the linear schedule.
        let n = 17.0;
        let mut prev = 0.0;
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let expected = n * t;
            assert!(expected >= prev);
            prev = expected;
        }
    }

    #[test]
    fn reverse_transition_s_zero_terminates_masking() {
        let law = reverse_transition(0.8, 0.0, &[0.25, 0.75]).unwrap();
        assert_eq!(law.stay_mask, 0.0);
        assert_eq!(law.resolve, vec![0.25, 0.75]);
    }

    #[test]
    fn reverse_transition_stay_probability_is_s_over_t() {
        let law = reverse_transition(0.8, 0.4, &[0.5, 0.5]).unwrap();
        assert!((law.stay_mask - 0.5).abs() < 1e-15);
    }

    #[test]
    fn reverse_transition_example_values() {
        let law = reverse_transition(0.6, 0.3, &[0.9, 0.1]).unwrap();
        assert!((law.stay_mask - 0.5).abs() < 1e-12);
        assert!((law.resolve[0] - 0.45).abs() < 1e-12);
        assert!((law.resolve[1] - 0.05).abs() < 1e-12);
        assert!((law.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_transition_rejects_bad_arguments() {
        assert!(matches!(
            reverse_transition(0.4, 0.4, &[1.0]),
            Err(Error::InvalidTimePair { .. })
        ));
        assert!(matches!(
            reverse_transition(0.3, 0.6, &[1.0]),
            Err(Error::InvalidTimePair { .. })
        ));
        assert!(matches!(
            reverse_transition(0.6, 0.3, &[0.9, 0.2]),
            Err(Error::Unnormalized { .. })
        ));
    }

    #[test]
    fn reverse_step_carries_over_resolved_positions() {
        let seq = MaskedSequence::new(vec![Some(1), None, Some(0)], 2, 0.7).unwrap();
        let rows = vec![vec![0.5, 0.5]; 3];
        let mut rng = stream(4, "test");
        for _ in 0..200 {
            let next = reverse_step(&seq, 0.2, &rows, &mut rng).unwrap();
            assert_eq!(next.entries[0], Some(1));
            assert_eq!(next.entries[2], Some(0));
        }
    }

    #[test]
    fn sample_categorical_inverse_cdf_hits_support() {
        let mut rng = stream(5, "test");
        let probs = [0.0, 1.0, 0.0];
        for _ in 0..50 {
            assert_eq!(sample_categorical(&probs, &mut rng), 1);
        }
    }
}
