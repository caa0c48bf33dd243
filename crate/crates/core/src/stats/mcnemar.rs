use serde::{Deserialize, Serialize};

use super::{chi2_sf, Direction, Method, StatsError, TestResult};

/// Discordant pair counts above this use the continuity-corrected chi-square.
pub const EXACT_MAX_DISCORDANT: u64 = 25;

/// Question-level agreement between two personae.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairedContingency {
    /// First correct, second incorrect.
    pub b: u64,
    /// First incorrect, second correct.
    pub c: u64,
    pub n_equal: u64,
}

pub fn paired_contingency(a: &[bool], b: &[bool]) -> Result<PairedContingency, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut table = PairedContingency::default();
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, false) => table.b += 1,
            (false, true) => table.c += 1,
            _ => table.n_equal += 1,
        }
    }
    Ok(table)
}

/// P[X <= k] for X ~ Binomial(n, 1/2), computed from exact integer counts.
///
/// Valid for `n <= 62`; the exact branch only ever asks for `n <= 25`.
pub fn binomial_cdf_half(k: u64, n: u64) -> f64 {
    assert!(n <= 62, "binomial_cdf_half supports n <= 62");
    if k >= n {
        return 1.0;
    }
    let mut coef: u128 = 1;
    let mut total: u128 = 0;
    for i in 0..=k {
        if i > 0 {
            coef = coef * u128::from(n - i + 1) / u128::from(i);
        }
        total += coef;
    }
    total as f64 / (1u128 << n) as f64
}

/// Two-sided McNemar test on the discordant counts.
///
/// Exact binomial for `b + c <= 25`, otherwise chi-square with continuity
/// correction on one degree of freedom.
pub fn mcnemar(b: u64, c: u64) -> TestResult {
    let n = b + c;
    let direction = Direction::from_difference(b as f64 - c as f64);
    if n == 0 {
        return TestResult::new(0.0, 1.0, Method::McnemarExact, Direction::None);
    }
    if n <= EXACT_MAX_DISCORDANT {
        let tail = binomial_cdf_half(b.min(c), n);
        let p = (2.0 * tail).min(1.0);
        TestResult::new(b.min(c) as f64, p, Method::McnemarExact, direction)
    } else {
        let diff = (b as f64 - c as f64).abs() - 1.0;
        let statistic = diff.max(0.0).powi(2) / n as f64;
        TestResult::new(statistic, chi2_sf(statistic, 1), Method::McnemarChi2, direction)
    }
}
