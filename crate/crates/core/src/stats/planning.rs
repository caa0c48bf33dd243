use serde::{Deserialize, Serialize};

/// Shape of a family of within-group pairwise tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestPlan {
    /// Number of personae in each tested group.
    pub group_sizes: Vec<usize>,
    pub models: usize,
    /// Subjects (experiment 1 and 2) or field-level cells (experiment 3).
    pub cells: usize,
}

/// `C(n, 2)`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Pairwise tests summed over groups, times models, times cells.
pub fn count_planned_tests(plan: &TestPlan) -> usize {
    plan.group_sizes.iter().map(|&g| pair_count(g)).sum::<usize>() * plan.models * plan.cells
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let exp1 = TestPlan {
            group_sizes: vec![2, 4, 3],
            models: 4,
            cells: 18,
        };
        assert_eq!(count_planned_tests(&exp1), 720);
        let single = TestPlan {
            group_sizes: vec![2],
            models: 1,
            cells: 1,
        };
        assert_eq!(count_planned_tests(&single), 1);
        let exp3 = TestPlan {
            group_sizes: vec![2, 4, 3],
            models: 1,
            cells: 10,
        };
        assert_eq!(count_planned_tests(&exp3), 100);
        assert_eq!(pair_count(0), 0);
        assert_eq!(pair_count(1), 0);
    }
}
