//! Continuous and simple active learning over hashed term frequencies.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{assemble_labels, FinalLabels, JudgmentPool, Strategy, StrategyConfig, StrategyError, StrategyKind, TopicScope};
use crate::calibration::sigmoid;
use crate::collection::{Collection, PairId};
use crate::grades::{binarize, lowest_relevant_grade, Grade};

const L2: f64 = 1e-4;
const STEP: f64 = 1.0;
const EPOCHS: usize = 100;
/// Random collection documents treated as non-relevant during training.
const PSEUDO_NEGATIVES: usize = 100;

/// Which classifier score CAL and SAL prefer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreRule {
    /// Highest predicted relevance (CAL).
    MostLikelyRelevant,
    /// Predicted relevance nearest 0.5 (SAL).
    MostUncertain,
}

type SparseVec = Vec<(u32, f64)>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Log-scaled, L2-normalized term frequencies hashed into `2^bits` buckets.
pub fn hashed_tf(text: &str, bits: u32) -> SparseVec {
    let mask = (1u64 << bits) - 1;
    let mut counts: HashMap<u32, f64> = HashMap::new();
    for token in text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
    {
        let bucket = (fnv1a(token.to_lowercase().as_bytes()) & mask) as u32;
        *counts.entry(bucket).or_default() += 1.0;
    }
    let mut v: SparseVec = counts.into_iter().map(|(k, c)| (k, 1.0 + f64::ln(c))).collect();
    v.sort_unstable_by_key(|e| e.0);
    let norm = v.iter().map(|e| e.1 * e.1).sum::<f64>().sqrt();
    if norm > 0.0 {
        for e in &mut v {
            e.1 /= norm;
        }
    }
    v
}

/// L2-regularized logistic regression fit by full-batch gradient descent on a
/// local vocabulary. Returns `(bias, weights by bucket)`.
fn train(examples: &[(&SparseVec, f64)]) -> (f64, HashMap<u32, f64>) {
    let mut vocab: HashMap<u32, usize> = HashMap::new();
    let local: Vec<Vec<(usize, f64)>> = examples
        .iter()
        .map(|(x, _)| {
            x.iter()
                .map(|&(k, v)| {
                    let next = vocab.len();
                    (*vocab.entry(k).or_insert(next), v)
                })
                .collect()
        })
        .collect();
    let mut w = vec![0.0; vocab.len()];
    let mut bias = 0.0;
    let n = examples.len() as f64;
    let mut grad = vec![0.0; w.len()];
    for _ in 0..EPOCHS {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (x, (_, y)) in local.iter().zip(examples) {
            let z = bias + x.iter().map(|&(k, v)| w[k] * v).sum::<f64>();
            let r = sigmoid(z) - y;
            gb += r;
            for &(k, v) in x {
                grad[k] += r * v;
            }
        }
        bias -= STEP * gb / n;
        for (wk, gk) in w.iter_mut().zip(&grad) {
            *wk -= STEP * (gk / n + L2 * *wk);
        }
    }
    let weights = vocab.into_iter().map(|(k, i)| (k, w[i])).collect();
    (bias, weights)
}

fn score(model: &(f64, HashMap<u32, f64>), x: &SparseVec) -> f64 {
    let z = model.0 + x.iter().map(|(k, v)| model.1.get(k).copied().unwrap_or(0.0) * v).sum::<f64>();
    sigmoid(z)
}

/// CAL/SAL: one classifier per topic, seeded with the topic statement as a
/// relevant example plus a fixed random sample of collection documents as
/// non-relevant ones, and retrained on the judged documents every
/// `retrain_every` judgments.
pub struct ActiveLearning {
    collection: Arc<Collection>,
    rule: ScoreRule,
    hybrid: bool,
    retrain_every: usize,
    docs: Vec<SparseVec>,
    seeds: Vec<SparseVec>,
    negatives: Vec<Vec<usize>>,
    scores: Vec<f64>,
    dirty: Vec<bool>,
    fixed: bool,
    since_retrain: usize,
}

impl ActiveLearning {
    pub fn new(collection: Arc<Collection>, rule: ScoreRule, config: &StrategyConfig, seed: u64) -> Self {
        let bits = config.hash_bits.clamp(1, 32);
        let docs = collection
            .pairs()
            .iter()
            .map(|k| hashed_tf(collection.doc_text(&k.doc).unwrap_or(""), bits))
            .collect();
        let seeds = collection
            .topic_ids()
            .iter()
            .map(|t| {
                let text = collection
                    .topic_text(t)
                    .map(|t| format!("{} {}", t.title, t.description))
                    .unwrap_or_default();
                hashed_tf(&text, bits)
            })
            .collect();
        let n = collection.len();
        let topics = collection.topic_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6361_6c73);
        let negatives = (0..topics)
            .map(|_| sample(&mut rng, n, PSEUDO_NEGATIVES.min(n)).into_vec())
            .collect();
        let mut s = Self {
            collection,
            rule,
            hybrid: config.hybrid,
            retrain_every: config.retrain_every.max(1),
            docs,
            seeds,
            negatives,
            scores: vec![0.5; n],
            dirty: vec![true; topics],
            fixed: false,
            since_retrain: 0,
        };
        let empty = JudgmentPool::new(s.collection.clone(), 0, 0);
        s.retrain(&empty);
        s
    }

    /// A classifier whose scores never change, for exercising the selection
    /// rule in isolation.
    pub fn with_fixed_scores(collection: Arc<Collection>, rule: ScoreRule, scores: Vec<f64>, hybrid: bool) -> Self {
        assert_eq!(scores.len(), collection.len());
        let topics = collection.topic_count();
        Self {
            collection,
            rule,
            hybrid,
            retrain_every: usize::MAX,
            docs: Vec::new(),
            seeds: Vec::new(),
            negatives: Vec::new(),
            scores,
            dirty: vec![false; topics],
            fixed: true,
            since_retrain: 0,
        }
    }

    pub fn score_of(&self, id: PairId) -> f64 {
        self.scores[id.0]
    }

    fn retrain_topic(&self, pool: &JudgmentPool, t: usize) -> (f64, HashMap<u32, f64>) {
        let l = pool.max_grade();
        let mut examples: Vec<(&SparseVec, f64)> = vec![(&self.seeds[t], 1.0)];
        examples.extend(
            self.negatives[t]
                .iter()
                .filter(|&&i| !pool.is_judged(PairId(i)))
                .map(|&i| (&self.docs[i], 0.0)),
        );
        for id in self.collection.topic_pairs(t) {
            if let Some(y) = pool.judged_grade(id) {
                examples.push((&self.docs[id.0], f64::from(binarize(y, l))));
            }
        }
        train(&examples)
    }

    fn retrain(&mut self, pool: &JudgmentPool) {
        for t in 0..self.dirty.len() {
            if !self.dirty[t] {
                continue;
            }
            let model = self.retrain_topic(pool, t);
            for id in self.collection.topic_pairs(t) {
                self.scores[id.0] = score(&model, &self.docs[id.0]);
            }
            self.dirty[t] = false;
        }
        self.since_retrain = 0;
    }

    fn preference(&self, id: PairId) -> f64 {
        let s = self.scores[id.0];
        match self.rule {
            ScoreRule::MostLikelyRelevant => s,
            ScoreRule::MostUncertain => -(s - 0.5).abs(),
        }
    }
}

impl Strategy for ActiveLearning {
    fn kind(&self) -> StrategyKind {
        match self.rule {
            ScoreRule::MostLikelyRelevant => StrategyKind::Cal,
            ScoreRule::MostUncertain => StrategyKind::Sal,
        }
    }

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError> {
        let mut best: Option<(f64, PairId)> = None;
        for t in scope.topics() {
            for id in self.collection.topic_pairs(t) {
                if pool.is_judged(id) {
                    continue;
                }
                let p = self.preference(id);
                if best.is_none_or(|(b, _)| p > b) {
                    best = Some((p, id));
                }
            }
        }
        best.map(|(_, id)| id).ok_or(StrategyError::Exhausted)
    }

    fn observe(&mut self, pool: &JudgmentPool, pair: PairId, _grade: Grade) {
        if self.fixed {
            return;
        }
        self.dirty[self.collection.topic_of(pair)] = true;
        self.since_retrain += 1;
        if self.since_retrain >= self.retrain_every {
            self.retrain(pool);
        }
    }

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        if !self.hybrid {
            return assemble_labels(pool, |_| 0);
        }
        let relevant = lowest_relevant_grade(pool.max_grade());
        let mut scores = self.scores.clone();
        if !self.fixed {
            for t in (0..self.dirty.len()).filter(|&t| self.dirty[t]) {
                let model = self.retrain_topic(pool, t);
                for id in self.collection.topic_pairs(t) {
                    scores[id.0] = score(&model, &self.docs[id.0]);
                }
            }
        }
        assemble_labels(pool, |id| if scores[id.0] > 0.5 { relevant } else { 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::collection;
    use super::super::{observe, StrategyKind};
    use super::*;

    #[test]
    fn hashed_tf_is_normalized() {
        let v = hashed_tf("Apple apple banana", 18);
        assert_eq!(v.len(), 2);
        let norm: f64 = v.iter().map(|e| e.1 * e.1).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(hashed_tf("", 18).is_empty());
    }

    #[test]
    fn fixed_scores_select_by_rule() {
        let c = collection(
            &[("1", "a", 0, 0.5), ("1", "b", 0, 0.5), ("2", "c", 0, 0.5), ("2", "d", 0, 0.5)],
            &[],
        );
        let scores = vec![0.2, 0.9, 0.55, 0.9];
        let pool = JudgmentPool::new(c.clone(), 4, 0);
        let all = TopicScope::all(2);
        let mut cal = ActiveLearning::with_fixed_scores(c.clone(), ScoreRule::MostLikelyRelevant, scores.clone(), false);
        assert_eq!(cal.next_pair(&pool, &all).unwrap(), PairId(1));
        let mut sal = ActiveLearning::with_fixed_scores(c.clone(), ScoreRule::MostUncertain, scores, false);
        assert_eq!(sal.next_pair(&pool, &all).unwrap(), PairId(2));
    }

    #[test]
    fn classifier_learns_from_judgments() {
        let c = collection(
            &[("1", "a", 1, 0.5), ("1", "b", 0, 0.5), ("1", "c", 1, 0.5), ("1", "d", 0, 0.5)],
            &[],
        );
        let cfg = StrategyConfig::new(StrategyKind::Cal).hybrid(true);
        let mut cal = ActiveLearning::new(c.clone(), ScoreRule::MostLikelyRelevant, &cfg, 0);
        let mut pool = JudgmentPool::new(c.clone(), 4, 0);
        for _ in 0..4 {
            let p = cal.next_pair(&pool, &TopicScope::all(1)).unwrap();
            observe(&mut cal, &mut pool, p, c.truth(p)).unwrap();
        }
        assert!(cal.finalize(&pool).predicted.is_empty());
        assert_eq!(cal.kind(), StrategyKind::Cal);
    }

    #[test]
    fn hybrid_maps_to_lowest_relevant_grade() {
        let c = collection(&[("1", "a", 0, 0.5), ("1", "b", 0, 0.5)], &[]);
        let s = ActiveLearning::with_fixed_scores(c.clone(), ScoreRule::MostUncertain, vec![0.8, 0.3], true);
        let pool = JudgmentPool::new(c.clone(), 0, 0);
        assert_eq!(s.finalize(&pool).dense(2), vec![1, 0]);
        let h = ActiveLearning::with_fixed_scores(c.clone(), ScoreRule::MostUncertain, vec![0.8, 0.3], false);
        assert_eq!(h.finalize(&pool).dense(2), vec![0, 0]);
    }
}
