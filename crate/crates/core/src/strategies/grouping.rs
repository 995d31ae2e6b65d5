use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StrategyError;

/// Topic partition for `n` assessors working in sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingPlan {
    /// Topic indices per group, ascending within each group.
    pub groups: Vec<Vec<usize>>,
    pub budgets: Vec<usize>,
}

/// Shuffles topics with `seed`, deals them round-robin into `n` groups and
/// splits `budget` evenly, giving the remainder to the first groups.
pub fn plan_groups(
    topics: usize,
    n: usize,
    budget: usize,
    seed: u64,
) -> Result<GroupingPlan, StrategyError> {
    if n == 0 || n > topics.max(1) {
        return Err(StrategyError::InvalidAssessorCount { n, topics });
    }
    let mut order: Vec<usize> = (0..topics).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); n];
    for (i, t) in order.into_iter().enumerate() {
        groups[i % n].push(t);
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    let base = budget / n;
    let extra = budget % n;
    let budgets = (0..n).map(|g| base + usize::from(g < extra)).collect();
    Ok(GroupingPlan { groups, budgets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fifty_topics_three_groups() {
        let plan = plan_groups(50, 3, 100, 7).unwrap();
        let sizes: Vec<usize> = plan.groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![17, 17, 16]);
        assert_eq!(plan.budgets, vec![34, 33, 33]);
    }

    #[test]
    fn rejects_bad_group_count() {
        assert!(plan_groups(5, 0, 10, 0).is_err());
        assert!(plan_groups(5, 6, 10, 0).is_err());
        assert!(plan_groups(5, 5, 10, 0).is_ok());
    }

    proptest! {
        #[test]
        fn plan_is_a_partition(topics in 1usize..80, n_frac in 0.0f64..1.0, budget in 0usize..10_000, seed: u64) {
            let n = 1 + ((topics - 1) as f64 * n_frac) as usize;
            let plan = plan_groups(topics, n, budget, seed).unwrap();
            let mut all: Vec<usize> = plan.groups.iter().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..topics).collect::<Vec<_>>());
            prop_assert_eq!(plan.budgets.iter().sum::<usize>(), budget);
            let lo = *plan.budgets.iter().min().unwrap();
            let hi = *plan.budgets.iter().max().unwrap();
            prop_assert!(hi - lo <= 1);
            prop_assert_eq!(plan_groups(topics, n, budget, seed).unwrap(), plan);
        }
    }
}
