//! Significance machinery: McNemar (exact and chi-square), Bonferroni,
//! Mann-Whitney U, Kruskal-Wallis, and the bookkeeping that counts how many
//! hypotheses an audit plans to test.
//!
//! Every test is two-sided. Direction is reported after the fact so callers
//! can say which side of a pair came out higher.

mod mcnemar;
mod planning;
mod rank;
mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mcnemar::{binomial_cdf_half, mcnemar, paired_contingency, PairedContingency, EXACT_MAX_DISCORDANT};
pub use planning::{count_planned_tests, pair_count, TestPlan};
pub use rank::{
    kruskal_wallis, mann_whitney, mann_whitney_exact, mann_whitney_u, mann_whitney_z, midranks,
    MannWhitneyU, EXACT_MAX_POOLED,
};
pub use special::{chi2_sf, erfc, gamma_q, ln_gamma, normal_sf};

/// Default significance level. The audit never learns the level the original
/// study used, so it is recorded in every report.
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired outcome lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("sample {index} is empty")]
    EmptySample { index: usize },
    #[error("at least {needed} groups are required, got {got}")]
    TooFewGroups { needed: usize, got: usize },
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("all pooled values are identical; the rank statistic is undefined")]
    Degenerate,
    #[error("exact permutation mode supports at most {max} pooled values, got {got}")]
    TooLargeForExact { max: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    McnemarExact,
    McnemarChi2,
    MannWhitney,
    MannWhitneyExact,
    KruskalWallis,
}

/// Which side of a two-sample comparison came out higher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    FirstHigher,
    SecondHigher,
    None,
}

impl Direction {
    pub fn from_difference(diff: f64) -> Self {
        if diff > 0.0 {
            Direction::FirstHigher
        } else if diff < 0.0 {
            Direction::SecondHigher
        } else {
            Direction::None
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::FirstHigher => Direction::SecondHigher,
            Direction::SecondHigher => Direction::FirstHigher,
            Direction::None => Direction::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p: f64,
    pub p_adjusted: f64,
    pub correction_m: u32,
    pub method: Method,
    pub direction: Direction,
    /// Set when the data carried no information (e.g. every pooled value tied).
    #[serde(default)]
    pub degenerate: bool,
}

impl TestResult {
    pub(crate) fn new(statistic: f64, p: f64, method: Method, direction: Direction) -> Self {
        let p = p.clamp(0.0, 1.0);
        Self {
            statistic,
            p,
            p_adjusted: p,
            correction_m: 1,
            method,
            direction,
            degenerate: false,
        }
    }

    /// Applies a Bonferroni factor `m` to the raw p value.
    pub fn corrected(mut self, m: u32) -> Self {
        let m = m.max(1);
        self.correction_m = m;
        self.p_adjusted = bonferroni(self.p, m);
        self
    }

    pub fn significant(&self, alpha: f64) -> bool {
        self.p_adjusted < alpha
    }

    pub fn significant_raw(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

/// Bonferroni-adjusted p value, `min(1, p * m)`.
pub fn bonferroni(p: f64, m: u32) -> f64 {
    (p * f64::from(m.max(1))).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bonferroni_examples() {
        assert!((bonferroni(0.01, 6) - 0.06).abs() < 1e-15);
        assert_eq!(bonferroni(0.3, 6), 1.0);
        assert!((bonferroni(0.004, 3) - 0.012).abs() < 1e-15);
        assert_eq!(bonferroni(0.2, 1), 0.2);
    }

    #[test]
    fn corrected_keeps_adjusted_above_raw() {
        let r = TestResult::new(1.0, 0.02, Method::MannWhitney, Direction::None).corrected(6);
        assert_eq!(r.correction_m, 6);
        assert!((r.p_adjusted - 0.12).abs() < 1e-15);
        assert!(r.p_adjusted >= r.p);
        assert!(r.significant_raw(0.05));
        assert!(!r.significant(0.05));
    }

    #[test]
    fn method_serializes_kebab_case() {
        assert_eq!(
            serde_json::to_string(&Method::McnemarExact).unwrap(),
            "\"mcnemar-exact\""
        );
        assert_eq!(
            serde_json::to_string(&Direction::SecondHigher).unwrap(),
            "\"second-higher\""
        );
    }
}
