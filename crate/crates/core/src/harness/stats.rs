//! Small statistics helpers shared by oracle checks and acceptance tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::{Error, Result};

/// Pearson chi-square statistic of observed counts against expected
/// probabilities (which must sum to ~1).
pub fn chi_square_stat(observed: &[u64], expected_probs: &[f64]) -> Result<f64> {
    if observed.len() != expected_probs.len() {
        return Err(Error::Argument(
            "observed and expected lengths differ".into(),
        ));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(Error::Argument("no observations".into()));
    }
    let mut stat = 0.0;
    for (&obs, &p) in observed.iter().zip(expected_probs) {
        let expect = p * n as f64;
        if expect <= 0.0 {
            if obs > 0 {
                return Err(Error::Argument(
                    "observed mass in a zero-probability cell".into(),
                ));
            }
            continue;
        }
        let d = obs as f64 - expect;
        stat += d * d / expect;
    }
    Ok(stat)
}

/// Upper-tail p-value of a chi-square statistic.
pub fn chi_square_p_value(stat: f64, dof: usize) -> Result<f64> {
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::Argument(format!("bad chi-square dof: {e}")))?;
    Ok(1.0 - dist.cdf(stat))
}

/// Sample standard error of the mean.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return f64::INFINITY;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}
