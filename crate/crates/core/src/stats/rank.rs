use super::{chi2_sf, normal_sf, Direction, Method, StatsError, TestResult};

/// Largest pooled sample the exact permutation mode will enumerate.
pub const EXACT_MAX_POOLED: usize = 12;

/// Midranks (1-based, ties averaged) of `values`, plus the sizes of every tie block.
pub fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && values[order[end + 1]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        for &idx in &order[start..=end] {
            ranks[idx] = rank;
        }
        let size = end - start + 1;
        if size > 1 {
            ties.push(size);
        }
        start = end + 1;
    }
    (ranks, ties)
}

fn tie_sum(ties: &[usize]) -> f64 {
    ties.iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum()
}

fn check_samples(samples: &[&[f64]]) -> Result<(), StatsError> {
    for (index, s) in samples.iter().enumerate() {
        if s.is_empty() {
            return Err(StatsError::EmptySample { index });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    Ok(())
}

/// U statistics and the tie-corrected null variance of U.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitneyU {
    pub u_x: f64,
    pub u_y: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> Result<MannWhitneyU, StatsError> {
    check_samples(&[x, y])?;
    let n1 = x.len() as f64;
    let n2 = y.len() as f64;
    let n = n1 + n2;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_x: f64 = ranks[..x.len()].iter().sum();
    let u_x = rank_sum_x - n1 * (n1 + 1.0) / 2.0;
    let variance = if n > 1.0 {
        (n1 * n2 / 12.0) * ((n + 1.0) - tie_sum(&ties) / (n * (n - 1.0)))
    } else {
        0.0
    };
    Ok(MannWhitneyU {
        u_x,
        u_y: n1 * n2 - u_x,
        mean: n1 * n2 / 2.0,
        variance: variance.max(0.0),
    })
}

/// Signed normal score of U_x, optionally with the 0.5 continuity correction.
pub fn mann_whitney_z(x: &[f64], y: &[f64], continuity: bool) -> Result<f64, StatsError> {
    let u = mann_whitney_u(x, y)?;
    if u.variance <= 0.0 {
        return Err(StatsError::Degenerate);
    }
    let diff = u.u_x - u.mean;
    let magnitude = if continuity {
        (diff.abs() - 0.5).max(0.0)
    } else {
        diff.abs()
    };
    Ok(magnitude.copysign(diff) / u.variance.sqrt())
}

/// Two-sided Mann-Whitney U test, normal approximation with tie-corrected
/// variance and continuity correction. The statistic is U of the first sample.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    let u = mann_whitney_u(x, y)?;
    if u.variance <= 0.0 {
        let mut r = TestResult::new(u.u_x, 1.0, Method::MannWhitney, Direction::None);
        r.degenerate = true;
        return Ok(r);
    }
    let z = (((u.u_x - u.mean).abs() - 0.5).max(0.0)) / u.variance.sqrt();
    let p = (2.0 * normal_sf(z)).min(1.0);
    Ok(TestResult::new(
        u.u_x,
        p,
        Method::MannWhitney,
        Direction::from_difference(u.u_x - u.mean),
    ))
}

/// Two-sided Mann-Whitney test by full enumeration of every relabelling of the
/// pooled sample: p = P(|U - mean| >= |U_obs - mean|).
pub fn mann_whitney_exact(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    let observed = mann_whitney_u(x, y)?;
    let n = x.len() + y.len();
    if n > EXACT_MAX_POOLED {
        return Err(StatsError::TooLargeForExact {
            max: EXACT_MAX_POOLED,
            got: n,
        });
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, _) = midranks(&pooled);
    let n1 = x.len();
    let offset = (n1 * (n1 + 1)) as f64 / 2.0;
    let threshold = (observed.u_x - observed.mean).abs() - 1e-9;

    let mut extreme = 0u64;
    let mut total = 0u64;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n1 {
            continue;
        }
        let rank_sum: f64 = (0..n)
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| ranks[i])
            .sum();
        total += 1;
        if (rank_sum - offset - observed.mean).abs() >= threshold {
            extreme += 1;
        }
    }
    let mut r = TestResult::new(
        observed.u_x,
        extreme as f64 / total as f64,
        Method::MannWhitneyExact,
        Direction::from_difference(observed.u_x - observed.mean),
    );
    r.degenerate = observed.variance <= 0.0;
    Ok(r)
}

/// Kruskal-Wallis H test with tie correction; p from chi-square on k - 1 df.
pub fn kruskal_wallis(groups: &[&[f64]]) -> Result<TestResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups {
            needed: 2,
            got: groups.len(),
        });
    }
    check_samples(groups)?;
    let pooled: Vec<f64> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let n = pooled.len() as f64;
    let (ranks, ties) = midranks(&pooled);
    let correction = 1.0 - tie_sum(&ties) / (n * n * n - n);
    if correction <= 0.0 {
        return Err(StatsError::Degenerate);
    }
    let mut start = 0;
    let mut weighted = 0.0;
    for g in groups {
        let r: f64 = ranks[start..start + g.len()].iter().sum();
        weighted += r * r / g.len() as f64;
        start += g.len();
    }
    let h = ((12.0 / (n * (n + 1.0)) * weighted - 3.0 * (n + 1.0)) / correction).max(0.0);
    let df = (groups.len() - 1) as u32;
    Ok(TestResult::new(
        h,
        chi2_sf(h, df),
        Method::KruskalWallis,
        Direction::None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn midranks_average_ties() {
        let (r, t) = midranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(t, vec![2]);
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.statistic, 4.5);
        assert_eq!(r.direction, Direction::None);
        assert_eq!(r.p, 1.0);

        let r = mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.direction, Direction::SecondHigher);
    }

    #[test]
    fn mann_whitney_degenerate_and_errors() {
        let r = mann_whitney(&[2.0, 2.0], &[2.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.p, r.direction), (1.0, Direction::None));
        assert_eq!(
            mann_whitney(&[], &[1.0]),
            Err(StatsError::EmptySample { index: 0 })
        );
        assert_eq!(mann_whitney(&[f64::NAN], &[1.0]), Err(StatsError::NonFinite));
    }

    #[test]
    fn exact_mode_small_case() {
        // complete separation of 3 vs 3: 2 of 20 relabellings are as extreme
        let r = mann_whitney_exact(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((r.p - 0.1).abs() < 1e-15);
        let big = [0.0; 7];
        assert!(matches!(
            mann_whitney_exact(&big, &big),
            Err(StatsError::TooLargeForExact { .. })
        ));
    }

    #[test]
    fn kruskal_wallis_examples() {
        let r = kruskal_wallis(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        // 12/42 * (9/2 + 49/2 + 121/2) - 21 = 32/7
        assert!((r.statistic - 32.0 / 7.0).abs() < 1e-12);
        assert!((r.p - (-16.0f64 / 7.0).exp()).abs() < 1e-12);
        assert_eq!(
            kruskal_wallis(&[&[1.0, 1.0], &[1.0]]),
            Err(StatsError::Degenerate)
        );
        assert!(matches!(
            kruskal_wallis(&[&[1.0]]),
            Err(StatsError::TooFewGroups { .. })
        ));
    }

    fn distinct(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1000i32..1000, len).prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn u_sums_to_product(x in distinct(1..20), y in distinct(1..20)) {
            let u = mann_whitney_u(&x, &y).unwrap();
            prop_assert!((u.u_x + u.u_y - (x.len() * y.len()) as f64).abs() < 1e-9);
        }

        #[test]
        fn rank_tests_invariant_under_monotone_maps(x in distinct(1..15), y in distinct(1..15), shift in -50.0f64..50.0) {
            let f = |v: &f64| (v / 100.0).exp() * 3.0 + shift;
            let fx: Vec<f64> = x.iter().map(f).collect();
            let fy: Vec<f64> = y.iter().map(f).collect();
            let a = mann_whitney(&x, &y).unwrap();
            let b = mann_whitney(&fx, &fy).unwrap();
            prop_assert_eq!(a.statistic, b.statistic);
            prop_assert_eq!(a.p, b.p);
            if let (Ok(k1), Ok(k2)) = (kruskal_wallis(&[&x, &y]), kruskal_wallis(&[&fx, &fy])) {
                prop_assert!((k1.statistic - k2.statistic).abs() < 1e-9);
                prop_assert!(k1.statistic >= 0.0);
            }
        }

        #[test]
        fn p_values_in_unit_interval(x in distinct(1..10), y in distinct(1..10), z in distinct(1..10)) {
            let r = mann_whitney(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&r.p));
            if let Ok(k) = kruskal_wallis(&[&x, &y, &z]) {
                prop_assert!((0.0..=1.0).contains(&k.p));
            }
        }
    }
}
