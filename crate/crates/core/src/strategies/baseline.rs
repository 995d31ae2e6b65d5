use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{assemble_labels, FinalLabels, JudgmentPool, OrderedQueue, Strategy, StrategyError, StrategyKind, TopicScope};
use crate::collection::{Collection, PairId};
use crate::grades::Grade;

/// Judges a seeded uniform permutation of the pool; the rest keep the LLM
/// argmax.
pub struct RandomOrder {
    collection: Arc<Collection>,
    queue: OrderedQueue,
}

impl RandomOrder {
    pub fn new(collection: Arc<Collection>, seed: u64) -> Self {
        let mut order: Vec<PairId> = collection.pair_ids().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self {
            collection,
            queue: OrderedQueue::new(order),
        }
    }
}

impl Strategy for RandomOrder {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Random
    }

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError> {
        self.queue.next(pool, scope).ok_or(StrategyError::Exhausted)
    }

    fn observe(&mut self, _pool: &JudgmentPool, _pair: PairId, _grade: Grade) {}

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        assemble_labels(pool, |id| self.collection.pi_or_uniform(id).argmax())
    }
}

/// No human judgments; every pair gets the LLM argmax.
pub struct LlmOnly {
    collection: Arc<Collection>,
}

impl LlmOnly {
    pub fn new(collection: Arc<Collection>) -> Self {
        Self { collection }
    }
}

impl Strategy for LlmOnly {
    fn kind(&self) -> StrategyKind {
        StrategyKind::LlmOnly
    }

    fn next_pair(&mut self, _pool: &JudgmentPool, _scope: &TopicScope) -> Result<PairId, StrategyError> {
        Err(StrategyError::Exhausted)
    }

    fn observe(&mut self, _pool: &JudgmentPool, _pair: PairId, _grade: Grade) {}

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        assemble_labels(pool, |id| self.collection.pi_or_uniform(id).argmax())
    }
}

/// Classic depth pooling: rank 1 of every system on every topic, then rank 2,
/// and so on. Pooled pairs no run retrieves come last. Unjudged pairs are
/// labelled non-relevant.
pub struct DepthK {
    queue: OrderedQueue,
}

impl DepthK {
    pub fn new(collection: Arc<Collection>) -> Self {
        Self {
            queue: OrderedQueue::new(depth_order(&collection)),
        }
    }

    pub fn order(&self) -> &[PairId] {
        self.queue.order()
    }
}

pub(crate) fn depth_order(c: &Collection) -> Vec<PairId> {
    let mut seen = vec![false; c.len()];
    let mut order = Vec::with_capacity(c.len());
    let max_depth = c
        .systems()
        .iter()
        .flat_map(|s| s.rankings.iter().map(Vec::len))
        .max()
        .unwrap_or(0);
    for depth in 0..max_depth {
        for t in 0..c.topic_count() {
            for sys in c.systems() {
                if let Some(Some(id)) = sys.rankings[t].get(depth) {
                    if !seen[id.0] {
                        seen[id.0] = true;
                        order.push(*id);
                    }
                }
            }
        }
    }
    order.extend(c.pair_ids().filter(|id| !seen[id.0]));
    order
}

impl Strategy for DepthK {
    fn kind(&self) -> StrategyKind {
        StrategyKind::DepthK
    }

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError> {
        self.queue.next(pool, scope).ok_or(StrategyError::Exhausted)
    }

    fn observe(&mut self, _pool: &JudgmentPool, _pair: PairId, _grade: Grade) {}

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        assemble_labels(pool, |_| 0)
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::collection;
    use super::super::observe;
    use super::*;

    #[test]
    fn depth_order_interleaves_systems() {
        let c = collection(
            &[
                ("1", "a", 1, 0.5),
                ("1", "b", 0, 0.5),
                ("1", "c", 0, 0.5),
                ("1", "z", 0, 0.5),
                ("2", "a", 1, 0.5),
            ],
            &[
                ("s1", "1", &["a", "b", "c"]),
                ("s2", "1", &["c", "a"]),
                ("s1", "2", &["a"]),
            ],
        );
        let names: Vec<String> = DepthK::new(c.clone())
            .order()
            .iter()
            .map(|&id| format!("{}{}", c.pair(id).topic, c.pair(id).doc))
            .collect();
        assert_eq!(names, ["1a", "1c", "2a", "1b", "1z"]);
    }

    #[test]
    fn random_is_seeded_permutation() {
        let pairs: Vec<(String, String)> = (0..20).map(|i| ("1".to_string(), format!("d{i:02}"))).collect();
        let spec: Vec<(&str, &str, Grade, f64)> = pairs.iter().map(|(t, d)| (t.as_str(), d.as_str(), 0, 0.3)).collect();
        let c = collection(&spec, &[]);
        let run = |seed| {
            let mut s = RandomOrder::new(c.clone(), seed);
            let mut pool = JudgmentPool::new(c.clone(), 20, seed);
            let mut out = Vec::new();
            while let Ok(p) = s.next_pair(&pool, &TopicScope::all(1)) {
                observe(&mut s, &mut pool, p, 0).unwrap();
                out.push(p);
            }
            out
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_ne!(a, run(2));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).map(PairId).collect::<Vec<_>>());
    }

    #[test]
    fn llm_only_never_proposes() {
        let c = collection(&[("1", "a", 1, 0.8), ("1", "b", 0, 0.3)], &[]);
        let mut s = LlmOnly::new(c.clone());
        let pool = JudgmentPool::new(c.clone(), 2, 0);
        assert_eq!(s.next_pair(&pool, &TopicScope::all(1)), Err(StrategyError::Exhausted));
        let labels = s.finalize(&pool);
        assert_eq!(labels.dense(2), vec![1, 0]);
    }
}
