//! Run-based adjudication: move-to-front pooling and a max-mean bandit over
//! systems. Both visit topics round-robin and, within a topic, pull the next
//! unjudged document from one system's ranking.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{assemble_labels, FinalLabels, JudgmentPool, Strategy, StrategyError, StrategyKind, TopicScope};
use crate::collection::{Collection, PairId};
use crate::grades::{binarize, Grade};

/// Per-topic, per-system read positions plus the topic rotation.
struct RunCursors {
    collection: Arc<Collection>,
    cursors: Vec<Vec<usize>>,
    unjudged: Vec<usize>,
    rotation: usize,
}

impl RunCursors {
    fn new(collection: Arc<Collection>) -> Self {
        let topics = collection.topic_count();
        let systems = collection.systems().len();
        let unjudged = (0..topics).map(|t| collection.topic_pairs(t).count()).collect();
        Self {
            collection,
            cursors: vec![vec![0; systems]; topics],
            unjudged,
            rotation: 0,
        }
    }

    /// Next topic in rotation that is in scope and has unjudged pairs.
    fn next_topic(&mut self, scope: &TopicScope) -> Option<usize> {
        let n = self.unjudged.len();
        for k in 0..n {
            let t = (self.rotation + k) % n;
            if scope.contains(t) && self.unjudged[t] > 0 {
                self.rotation = (t + 1) % n;
                return Some(t);
            }
        }
        None
    }

    /// Next unjudged pooled document in system `s`'s ranking for topic `t`.
    fn peek(&mut self, pool: &JudgmentPool, t: usize, s: usize) -> Option<PairId> {
        let ranking = &self.collection.systems()[s].rankings[t];
        let cur = &mut self.cursors[t][s];
        while *cur < ranking.len() {
            match ranking[*cur] {
                Some(id) if !pool.is_judged(id) => return Some(id),
                _ => *cur += 1,
            }
        }
        None
    }

    fn judged(&mut self, pair: PairId) {
        let t = self.collection.topic_of(pair);
        self.unjudged[t] -= 1;
    }
}

/// Move-to-front pooling. A system keeps supplying documents while they are
/// relevant; a non-relevant one sends it to the back of the topic's queue.
pub struct MoveToFront {
    runs: RunCursors,
    priority: Vec<Vec<i64>>,
    pending: Option<(PairId, usize, Option<usize>)>,
}

impl MoveToFront {
    pub fn new(collection: Arc<Collection>) -> Self {
        let topics = collection.topic_count();
        let systems = collection.systems().len();
        Self {
            runs: RunCursors::new(collection),
            priority: vec![vec![0; systems]; topics],
            pending: None,
        }
    }

    /// Priority of system `s` on topic `t`; larger is served first.
    pub fn priority(&self, t: usize, s: usize) -> i64 {
        self.priority[t][s]
    }
}

impl Strategy for MoveToFront {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Mtf
    }

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError> {
        let t = self.runs.next_topic(scope).ok_or(StrategyError::Exhausted)?;
        let mut systems: Vec<usize> = (0..self.priority[t].len()).collect();
        systems.sort_by_key(|&s| (std::cmp::Reverse(self.priority[t][s]), s));
        for s in systems {
            if let Some(id) = self.runs.peek(pool, t, s) {
                self.pending = Some((id, t, Some(s)));
                return Ok(id);
            }
        }
        let id = pool.first_unjudged_in_topic(t).ok_or(StrategyError::Exhausted)?;
        self.pending = Some((id, t, None));
        Ok(id)
    }

    fn observe(&mut self, pool: &JudgmentPool, pair: PairId, grade: Grade) {
        self.runs.judged(pair);
        if let Some((id, t, Some(s))) = self.pending.take() {
            if id == pair && binarize(grade, pool.max_grade()) == 0 {
                let min = self.priority[t].iter().copied().min().unwrap_or(0);
                self.priority[t][s] = min - 1;
            }
        }
    }

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        assemble_labels(pool, |_| 0)
    }
}

/// Max-mean bandit with non-stationary updates. Arms are systems; the reward
/// of a pull is the binarized judgment.
pub struct MaxMeanBandit {
    runs: RunCursors,
    estimates: Vec<Vec<f64>>,
    alpha: f64,
    epsilon: f64,
    rng: ChaCha8Rng,
    pending: Option<(PairId, usize, Option<usize>)>,
}

impl MaxMeanBandit {
    pub fn new(collection: Arc<Collection>, alpha: f64, epsilon: f64, seed: u64) -> Self {
        let topics = collection.topic_count();
        let systems = collection.systems().len();
        Self {
            runs: RunCursors::new(collection),
            estimates: vec![vec![1.0; systems]; topics],
            alpha,
            epsilon,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6d6d_6e73),
            pending: None,
        }
    }

    pub fn estimate(&self, t: usize, s: usize) -> f64 {
        self.estimates[t][s]
    }
}

impl Strategy for MaxMeanBandit {
    fn kind(&self) -> StrategyKind {
        StrategyKind::MmNs
    }

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError> {
        let t = self.runs.next_topic(scope).ok_or(StrategyError::Exhausted)?;
        if self.rng.random::<f64>() < self.epsilon {
            let open: Vec<PairId> = self
                .runs
                .collection
                .topic_pairs(t)
                .filter(|&p| !pool.is_judged(p))
                .collect();
            let id = open[self.rng.random_range(0..open.len())];
            self.pending = Some((id, t, None));
            return Ok(id);
        }
        let mut best: Option<(f64, usize, PairId)> = None;
        for s in 0..self.estimates[t].len() {
            if let Some(id) = self.runs.peek(pool, t, s) {
                let est = self.estimates[t][s];
                if best.is_none_or(|(b, _, _)| est > b) {
                    best = Some((est, s, id));
                }
            }
        }
        let (id, source) = match best {
            Some((_, s, id)) => (id, Some(s)),
            None => (pool.first_unjudged_in_topic(t).ok_or(StrategyError::Exhausted)?, None),
        };
        self.pending = Some((id, t, source));
        Ok(id)
    }

    fn observe(&mut self, pool: &JudgmentPool, pair: PairId, grade: Grade) {
        self.runs.judged(pair);
        if let Some((id, t, Some(s))) = self.pending.take() {
            if id == pair {
                let reward = f64::from(binarize(grade, pool.max_grade()));
                let est = &mut self.estimates[t][s];
                *est += self.alpha * (reward - *est);
            }
        }
    }

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        assemble_labels(pool, |_| 0)
    }
}
