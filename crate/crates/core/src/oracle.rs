//! Brute-force and closed-form references.
//!
//! These refuse instances beyond their size guards rather than approximate:
//! approximation belongs to the engine, the reference stays exact.
//!
//! - [`enumerate_forward`] — the exact distribution over mask patterns.
//! - [`exact_bound`] — the exact negative-log-likelihood bound via Beta
//!   weights `w(m, N) = (m-1)!(N-m)!/N!`; the per-pattern integrand is
//!   t-independent, so the time integral factorizes with no quadrature.
//! - [`truncated_bound`] — the same bound with the `t ~ U(eps, 1)` floor the
//!   Monte Carlo estimator uses, for quantifying the floor's bias.
//! - [`enumerate_reverse`] — the exact output distribution of the reverse
//!   sampler over all keep-set and token-choice trajectories.

use std::collections::BTreeMap;

use crate::conversation::{
    layout, AttentionMaskKind, ConversationExample, CorpusClass, SequenceLayout, Slot, Turn,
};
use crate::predictor::{MaskPredictor, PredictorInput};
use crate::sampler::{tempered_row, unmask_counts, RemaskStrategy};
use crate::vocab::TokenId;
use crate::{diffusion, Error, Result};

/// Exact probability of every mask pattern over `n` positions at level `t`.
#[derive(Debug, Clone)]
pub struct PatternDistribution {
    pub n: usize,
    /// Indexed by bitmask; bit `i` set means position `i` is masked.
    pub probs: Vec<f64>,
}

impl PatternDistribution {
    pub fn prob(&self, pattern_bits: usize) -> f64 {
        self.probs[pattern_bits]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Marginal mask probability of one position.
    pub fn marginal(&self, position: usize) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|(bits, _)| bits >> position & 1 == 1)
            .map(|(_, p)| p)
            .sum()
    }
}

/// `P(pattern with m masks) = t^m (1-t)^(N-m)` per specific pattern.
pub fn enumerate_forward(n: usize, t: f64) -> Result<PatternDistribution> {
    diffusion::check_noise_level(t)?;
    if n > 20 {
        return Err(Error::TooLarge(format!(
            "2^{n} mask patterns exceed the enumeration guard (n <= 20)"
        )));
    }
    let probs = (0..1usize << n)
        .map(|bits| {
            let m = bits.count_ones() as i32;
            t.powi(m) * (1.0 - t).powi(n as i32 - m)
        })
        .collect();
    Ok(PatternDistribution { n, probs })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

fn binomial(n: usize, k: usize) -> f64 {
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Closed-form Beta weight `w(m, N) = (m-1)!(N-m)!/N!` for a pattern with
/// `m >= 1` masked positions out of `N`.
pub fn beta_weight(m: usize, n: usize) -> f64 {
    factorial(m - 1) * factorial(n - m) / factorial(n)
}

/// Beta weight truncated to the `t ~ U(eps, 1)` estimator:
/// `(1/(1-eps)) * integral_eps^1 t^(m-1) (1-t)^(N-m) dt`, computed exactly by
/// binomial expansion of the polynomial integrand.
pub fn truncated_beta_weight(m: usize, n: usize, eps: f64) -> f64 {
    let mut integral = 0.0;
    for j in 0..=(n - m) {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let power = (m + j) as f64;
        integral += sign * binomial(n - m, j) * (1.0 - eps.powf(power)) / power;
    }
    integral / (1.0 - eps)
}

const MAX_BOUND_POSITIONS: usize = 12;

/// Response positions of an example's layout, with their true tokens.
fn response_targets(
    example: &ConversationExample,
) -> Result<(SequenceLayout, Vec<(usize, TokenId)>)> {
    let lay = layout(example)?;
    let targets = lay
        .response_positions()
        .into_iter()
        .map(|pos| {
            lay.token_at(pos)
                .map(|tok| (pos, tok))
                .ok_or_else(|| Error::Validation("layout already corrupted".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((lay, targets))
}

fn bound_with_weights(
    example: &ConversationExample,
    predictor: &dyn MaskPredictor,
    kind: AttentionMaskKind,
    weight: impl Fn(usize, usize) -> f64,
) -> Result<f64> {
    let (lay, targets) = response_targets(example)?;
    let n = targets.len();
    if n == 0 {
        return Err(Error::Validation("example has no response tokens".into()));
    }
    if n > MAX_BOUND_POSITIONS {
        return Err(Error::TooLarge(format!(
            "2^{n} patterns exceed the bound guard (N <= {MAX_BOUND_POSITIONS})"
        )));
    }
    let mut bound = 0.0;
    for bits in 1usize..1 << n {
        let m = bits.count_ones() as usize;
        let mut corrupted = lay.clone();
        for (i, &(pos, _)) in targets.iter().enumerate() {
            if bits >> i & 1 == 1 {
                corrupted.entries[pos].slot = Slot::Masked;
            }
        }
        let input = PredictorInput::from_layout(&corrupted, kind);
        let grid = predictor.predict(&input)?;
        let mut masked_sum = 0.0;
        for (i, &(pos, tok)) in targets.iter().enumerate() {
            if bits >> i & 1 == 1 {
                let p = grid.rows[pos][tok as usize];
                if p <= 0.0 {
                    return Err(Error::Numeric(format!(
                        "predictor assigns zero probability to true token at position {pos}"
                    )));
                }
                masked_sum += -p.ln();
            }
        }
        bound += weight(m, n) * masked_sum;
    }
    Ok(bound)
}

/// Exact negative-log-likelihood bound:
/// `sum over nonempty patterns of w(m, N) * sum_masked -log p(true | pattern)`.
pub fn exact_bound(
    example: &ConversationExample,
    predictor: &dyn MaskPredictor,
    kind: AttentionMaskKind,
) -> Result<f64> {
    bound_with_weights(example, predictor, kind, beta_weight)
}

/// The exact expectation of the Monte Carlo estimator under the
/// `t ~ U(eps, 1)` floor; converges to [`exact_bound`] as `eps -> 0`.
pub fn truncated_bound(
    example: &ConversationExample,
    predictor: &dyn MaskPredictor,
    kind: AttentionMaskKind,
    eps: f64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Argument(format!("eps {eps} outside [0, 1)")));
    }
    bound_with_weights(example, predictor, kind, |m, n| {
        truncated_beta_weight(m, n, eps)
    })
}

/// Exact forward-pattern distribution restricted to the response positions of
/// an example (the forward oracle for `corrupt_responses`).
pub fn enumerate_response_forward(
    example: &ConversationExample,
    t: f64,
) -> Result<PatternDistribution> {
    let (_, targets) = response_targets(example)?;
    enumerate_forward(targets.len(), t)
}

/// Exact output distribution of the reverse sampler.
///
/// Enumerates every trajectory of the ceil keep-count schedule: at each step
/// the predictor (conditioned on a minimal single-turn context around the
/// partially resolved response) proposes tokens for all masked positions;
/// `RANDOM` sums over uniformly chosen keep subsets, `LOW_CONFIDENCE` over
/// all joint token draws with the deterministic highest-confidence keep rule
/// (ties to the lowest position).
pub fn enumerate_reverse(
    predictor: &dyn MaskPredictor,
    gen_len: usize,
    width: usize,
    steps: usize,
    strategy: RemaskStrategy,
    temperature: f64,
) -> Result<BTreeMap<Vec<TokenId>, f64>> {
    if gen_len > 3 || width > 3 || steps > 3 {
        return Err(Error::TooLarge(
            "reverse enumeration guard: L <= 3, K <= 3, S <= 3".into(),
        ));
    }
    if gen_len == 0 {
        return Err(Error::Validation("generation length must be >= 1".into()));
    }
    let counts = unmask_counts(gen_len, steps);

    // State: partial assignment over the response positions.
    let mut states: BTreeMap<Vec<Option<TokenId>>, f64> = BTreeMap::new();
    states.insert(vec![None; gen_len], 1.0);

    for &n_keep in &counts {
        let mut next: BTreeMap<Vec<Option<TokenId>>, f64> = BTreeMap::new();
        for (state, p) in &states {
            let masked: Vec<usize> = (0..gen_len).filter(|&i| state[i].is_none()).collect();
            let grid = predict_on_response(predictor, state)?;
            let rows: Vec<(usize, Vec<f64>, Vec<f64>)> = masked
                .iter()
                .map(|&i| {
                    let raw = grid[i].clone();
                    let temp = tempered_row(&raw, temperature);
                    (i, raw, temp)
                })
                .collect();
            match strategy {
                RemaskStrategy::Random => {
                    // Keep-set choice is independent of drawn values, so sum
                    // over subsets x kept-token draws only.
                    let subsets = k_subsets(masked.len(), n_keep);
                    let subset_p = 1.0 / subsets.len() as f64;
                    for subset in subsets {
                        let kept: Vec<&(usize, Vec<f64>, Vec<f64>)> =
                            subset.iter().map(|&j| &rows[j]).collect();
                        enumerate_assignments(&kept, width, &mut |choice, prob| {
                            let mut s = state.clone();
                            for (slot, (pos, _, _)) in choice.iter().zip(&kept) {
                                s[*pos] = Some(*slot);
                            }
                            *next.entry(s).or_insert(0.0) += p * subset_p * prob;
                        });
                    }
                }
                RemaskStrategy::LowConfidence => {
                    // Keep set depends on the drawn confidences: enumerate the
                    // full joint draw over all masked positions.
                    let all: Vec<&(usize, Vec<f64>, Vec<f64>)> = rows.iter().collect();
                    enumerate_assignments(&all, width, &mut |choice, prob| {
                        // Confidence = untempered probability of the chosen
                        // token; ties broken by lowest position index.
                        let mut order: Vec<usize> = (0..all.len()).collect();
                        order.sort_by(|&a, &b| {
                            let ca = all[a].1[choice[a] as usize];
                            let cb = all[b].1[choice[b] as usize];
                            cb.partial_cmp(&ca)
                                .unwrap()
                                .then(all[a].0.cmp(&all[b].0))
                        });
                        let mut s = state.clone();
                        for &j in order.iter().take(n_keep) {
                            s[all[j].0] = Some(choice[j]);
                        }
                        *next.entry(s).or_insert(0.0) += p * prob;
                    });
                }
            }
        }
        states = next;
    }

    let mut out = BTreeMap::new();
    for (state, p) in states {
        let seq: Vec<TokenId> = state
            .into_iter()
            .map(|s| s.expect("schedule resolves all positions"))
            .collect();
        *out.entry(seq).or_insert(0.0) += p;
    }
    let total: f64 = out.values().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Numeric(format!(
            "reverse enumeration mass {total} != 1"
        )));
    }
    Ok(out)
}

/// Run the predictor on a single-turn context whose response carries the
/// given partial assignment; returns the response rows in position order.
fn predict_on_response(
    predictor: &dyn MaskPredictor,
    state: &[Option<TokenId>],
) -> Result<Vec<Vec<f64>>> {
    let example = ConversationExample {
        image: None,
        turns: vec![Turn {
            prompt: vec![0],
            response: state.iter().map(|s| s.unwrap_or(0)).collect(),
        }],
        class: CorpusClass::Direct,
    };
    let mut lay = layout(&example)?;
    let resp = lay.response_positions();
    for (&pos, slot) in resp.iter().zip(state) {
        if slot.is_none() {
            lay.entries[pos].slot = Slot::Masked;
        }
    }
    let input = PredictorInput::from_layout(&lay, AttentionMaskKind::NoMask);
    let grid = predictor.predict(&input)?;
    Ok(resp.iter().map(|&pos| grid.rows[pos].clone()).collect())
}

/// All k-subsets of `0..n` in lexicographic order.
fn k_subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

/// Visit every token assignment for the given rows with its joint tempered
/// probability (product of per-position tempered rows).
fn enumerate_assignments(
    rows: &[&(usize, Vec<f64>, Vec<f64>)],
    width: usize,
    visit: &mut impl FnMut(&[TokenId], f64),
) {
    let mut choice = vec![0 as TokenId; rows.len()];
    fn rec(
        rows: &[&(usize, Vec<f64>, Vec<f64>)],
        width: usize,
        depth: usize,
        prob: f64,
        choice: &mut Vec<TokenId>,
        visit: &mut impl FnMut(&[TokenId], f64),
    ) {
        if prob == 0.0 {
            return;
        }
        if depth == rows.len() {
            visit(choice, prob);
            return;
        }
        for v in 0..width {
            choice[depth] = v as TokenId;
            let p = rows[depth].2[v];
            rec(rows, width, depth + 1, prob * p, choice, visit);
        }
    }
    rec(rows, width, 0, 1.0, &mut choice, visit);
}
