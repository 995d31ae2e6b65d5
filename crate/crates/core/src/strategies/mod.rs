//! Document-selection strategies behind one step interface.
//!
//! Every strategy answers `next_pair` with an unjudged pair from the topics
//! in scope, is told the human grade through `observe`, and produces the final
//! label set with `finalize`. The same calls serve simulated sweeps and live
//! sessions.

mod active;
mod baseline;
mod grouping;
mod margin;
mod pooling;
mod session;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{Calibrator, FitConfig};
use crate::collection::{Collection, PairId};
use crate::grades::Grade;

pub use active::{hashed_tf, ActiveLearning, ScoreRule};
pub use baseline::{DepthK, LlmOnly, RandomOrder};
pub use grouping::{plan_groups, GroupingPlan};
pub use margin::{Lara, Naive, LARGE_POOL};
pub use pooling::{MaxMeanBandit, MoveToFront};
pub use session::{Proposal, SelectionSession, SessionSnapshot};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StrategyError {
    #[error("no unjudged pair remains in scope")]
    Exhausted,
    #[error("unknown pair id {0:?}")]
    UnknownPair(PairId),
    #[error("pair {0:?} has already been judged")]
    DoubleObserve(PairId),
    #[error("grade {grade} outside 0..={max_grade}")]
    GradeOutOfRange { grade: Grade, max_grade: Grade },
    #[error("judgment budget is exhausted")]
    BudgetExhausted,
    #[error("assessor count {n} must be between 1 and the number of topics ({topics})")]
    InvalidAssessorCount { n: usize, topics: usize },
    #[error("pair {0:?} was not proposed")]
    NotProposed(PairId),
    #[error("replayed judgment {0} does not match the strategy's proposal")]
    ReplayDiverged(usize),
}

/// Strategy family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Lara,
    Naive,
    Random,
    LlmOnly,
    DepthK,
    Mtf,
    MmNs,
    Cal,
    Sal,
}

impl StrategyKind {
    /// Whether unjudged pairs receive LLM-derived labels rather than grade 0.
    pub fn uses_llm(self) -> bool {
        matches!(
            self,
            StrategyKind::Lara | StrategyKind::Naive | StrategyKind::Random | StrategyKind::LlmOnly
        )
    }
}

/// Number of assessors, i.e. topic groups. `PerTopic` is `n = N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assessors {
    Count(usize),
    PerTopic,
}

impl Default for Assessors {
    fn default() -> Self {
        Assessors::Count(1)
    }
}

impl Assessors {
    pub fn resolve(self, topics: usize) -> usize {
        match self {
            Assessors::Count(n) => n,
            Assessors::PerTopic => topics,
        }
    }
}

impl fmt::Display for Assessors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assessors::Count(n) => write!(f, "{n}"),
            Assessors::PerTopic => f.write_str("N"),
        }
    }
}

impl Serialize for Assessors {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Assessors::Count(n) => s.serialize_u64(*n as u64),
            Assessors::PerTopic => s.serialize_str("N"),
        }
    }
}

impl<'de> Deserialize<'de> for Assessors {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Count(n) => Ok(Assessors::Count(n)),
            Repr::Name(s) if s == "N" || s == "n" => Ok(Assessors::PerTopic),
            Repr::Name(s) => s
                .parse()
                .map(Assessors::Count)
                .map_err(|_| serde::de::Error::custom(format!("invalid assessor count {s:?}"))),
        }
    }
}

/// Strategy configuration block as it appears in experiment and session files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub assessors: Assessors,
    /// CAL/SAL: label unjudged pairs with the classifier instead of grade 0.
    #[serde(default)]
    pub hybrid: bool,
    #[serde(default)]
    pub calibration: FitConfig,
    /// LARA refit cadence in judgments. Unset: every judgment up to 50k
    /// pairs, every 10 above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refit_every: Option<usize>,
    /// LARA: keep the identity calibrator throughout.
    #[serde(default)]
    pub freeze_calibration: bool,
    #[serde(default = "default_alpha")]
    pub bandit_alpha: f64,
    #[serde(default = "default_epsilon")]
    pub bandit_epsilon: f64,
    #[serde(default = "default_retrain")]
    pub retrain_every: usize,
    #[serde(default = "default_hash_bits")]
    pub hash_bits: u32,
}

fn default_alpha() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_retrain() -> usize {
    10
}
fn default_hash_bits() -> u32 {
    18
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            label: None,
            assessors: Assessors::default(),
            hybrid: false,
            calibration: FitConfig::default(),
            refit_every: None,
            freeze_calibration: false,
            bandit_alpha: default_alpha(),
            bandit_epsilon: default_epsilon(),
            retrain_every: default_retrain(),
            hash_bits: default_hash_bits(),
        }
    }

    pub fn with_assessors(mut self, assessors: Assessors) -> Self {
        self.assessors = assessors;
        self
    }

    pub fn hybrid(mut self, hybrid: bool) -> Self {
        self.hybrid = hybrid;
        self
    }

    /// Display name, e.g. `LARA(n=3)` or `CAL(hybrid)`.
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let mode = if self.hybrid { "hybrid" } else { "human" };
        match self.kind {
            StrategyKind::Lara => format!("LARA(n={})", self.assessors),
            StrategyKind::Naive => "Naive".into(),
            StrategyKind::Random => "Random".into(),
            StrategyKind::LlmOnly => "LLM-Only".into(),
            StrategyKind::DepthK => "Depth-k".into(),
            StrategyKind::Mtf => "MTF".into(),
            StrategyKind::MmNs => "MM-NS".into(),
            StrategyKind::Cal => format!("CAL({mode})"),
            StrategyKind::Sal => format!("SAL({mode})"),
        }
    }

    /// Instantiates the strategy against a collection.
    pub fn build(&self, collection: &Arc<Collection>, seed: u64) -> Box<dyn Strategy> {
        match self.kind {
            StrategyKind::Lara => Box::new(Lara::new(collection.clone(), self)),
            StrategyKind::Naive => Box::new(Naive::new(collection.clone())),
            StrategyKind::Random => Box::new(RandomOrder::new(collection.clone(), seed)),
            StrategyKind::LlmOnly => Box::new(LlmOnly::new(collection.clone())),
            StrategyKind::DepthK => Box::new(DepthK::new(collection.clone())),
            StrategyKind::Mtf => Box::new(MoveToFront::new(collection.clone())),
            StrategyKind::MmNs => Box::new(MaxMeanBandit::new(
                collection.clone(),
                self.bandit_alpha,
                self.bandit_epsilon,
                seed,
            )),
            StrategyKind::Cal => Box::new(ActiveLearning::new(
                collection.clone(),
                ScoreRule::MostLikelyRelevant,
                self,
                seed,
            )),
            StrategyKind::Sal => Box::new(ActiveLearning::new(
                collection.clone(),
                ScoreRule::MostUncertain,
                self,
                seed,
            )),
        }
    }
}

/// Which topics a proposal may come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicScope(Vec<bool>);

impl TopicScope {
    pub fn all(topics: usize) -> Self {
        Self(vec![true; topics])
    }

    pub fn only(topics: usize, allowed: &[usize]) -> Self {
        let mut mask = vec![false; topics];
        for &t in allowed {
            mask[t] = true;
        }
        Self(mask)
    }

    pub fn contains(&self, topic: usize) -> bool {
        self.0[topic]
    }

    pub fn topics(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(t, _)| t)
    }
}

/// The dataset with its judged subset `A` and budget `B`.
#[derive(Debug, Clone)]
pub struct JudgmentPool {
    collection: Arc<Collection>,
    judged: Vec<Option<Grade>>,
    order: Vec<PairId>,
    budget: usize,
    seed: u64,
}

impl JudgmentPool {
    /// `budget` is clamped to `|D|`.
    pub fn new(collection: Arc<Collection>, budget: usize, seed: u64) -> Self {
        let n = collection.len();
        Self {
            collection,
            judged: vec![None; n],
            order: Vec::new(),
            budget: budget.min(n),
            seed,
        }
    }

    pub fn collection(&self) -> &Arc<Collection> {
        &self.collection
    }

    pub fn len(&self) -> usize {
        self.judged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judged.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_judged(&self, id: PairId) -> bool {
        self.judged[id.0].is_some()
    }

    pub fn judged_grade(&self, id: PairId) -> Option<Grade> {
        self.judged[id.0]
    }

    pub fn judged_count(&self) -> usize {
        self.order.len()
    }

    pub fn remaining_budget(&self) -> usize {
        self.budget - self.order.len()
    }

    /// Judgment sequence in the order judgments arrived.
    pub fn judgment_order(&self) -> &[PairId] {
        &self.order
    }

    pub fn judged_map(&self) -> BTreeMap<PairId, Grade> {
        self.order.iter().map(|&p| (p, self.judged[p.0].unwrap())).collect()
    }

    pub fn max_grade(&self) -> Grade {
        self.collection.max_grade
    }

    /// Adds `(pair, grade)` to `A`.
    pub fn record(&mut self, pair: PairId, grade: Grade) -> Result<(), StrategyError> {
        let slot = self
            .judged
            .get_mut(pair.0)
            .ok_or(StrategyError::UnknownPair(pair))?;
        if slot.is_some() {
            return Err(StrategyError::DoubleObserve(pair));
        }
        if grade > self.collection.max_grade {
            return Err(StrategyError::GradeOutOfRange {
                grade,
                max_grade: self.collection.max_grade,
            });
        }
        if self.order.len() >= self.budget {
            return Err(StrategyError::BudgetExhausted);
        }
        *slot = Some(grade);
        self.order.push(pair);
        Ok(())
    }

    /// First unjudged pair of topic `t` in id order.
    pub(crate) fn first_unjudged_in_topic(&self, t: usize) -> Option<PairId> {
        self.collection.topic_pairs(t).find(|&p| !self.is_judged(p))
    }
}

/// Output of a finished session: human grades for `A`, predictions for the rest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalLabels {
    pub human: BTreeMap<PairId, Grade>,
    pub predicted: BTreeMap<PairId, Grade>,
}

impl FinalLabels {
    pub fn grade(&self, id: PairId) -> Option<Grade> {
        self.human.get(&id).or_else(|| self.predicted.get(&id)).copied()
    }

    /// Labels indexed by pair id. Panics if a pair is unlabelled.
    pub fn dense(&self, n: usize) -> Vec<Grade> {
        (0..n)
            .map(|i| self.grade(PairId(i)).expect("label set covers the pool"))
            .collect()
    }

    pub fn covers(&self, n: usize) -> bool {
        (0..n).all(|i| self.grade(PairId(i)).is_some())
    }
}

/// A selection strategy. `observe` is called after the pool has recorded the
/// judgment.
pub trait Strategy: Send + Sync {
    fn kind(&self) -> StrategyKind;

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError>;

    fn observe(&mut self, pool: &JudgmentPool, pair: PairId, grade: Grade);

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels;

    /// Current calibrator, for strategies that have one.
    fn calibrator(&self) -> Option<Calibrator> {
        None
    }
}

/// Validates and applies one judgment: records it in the pool, then updates
/// the strategy.
pub fn observe(
    strategy: &mut dyn Strategy,
    pool: &mut JudgmentPool,
    pair: PairId,
    grade: Grade,
) -> Result<(), StrategyError> {
    pool.record(pair, grade)?;
    strategy.observe(pool, pair, grade);
    Ok(())
}

/// Predictions for every unjudged pair via `label`; judged pairs keep the
/// human grade.
pub(crate) fn assemble_labels(pool: &JudgmentPool, mut label: impl FnMut(PairId) -> Grade) -> FinalLabels {
    let mut out = FinalLabels {
        human: pool.judged_map(),
        predicted: BTreeMap::new(),
    };
    for id in pool.collection().pair_ids() {
        if !pool.is_judged(id) {
            out.predicted.insert(id, label(id));
        }
    }
    out
}

/// Walks a fixed priority order, returning the first unjudged in-scope pair.
/// `cursor` only advances past judged pairs, so out-of-scope pairs are
/// revisited later.
#[derive(Debug, Clone)]
pub(crate) struct OrderedQueue {
    order: Vec<PairId>,
    cursor: usize,
}

impl OrderedQueue {
    pub(crate) fn new(order: Vec<PairId>) -> Self {
        Self { order, cursor: 0 }
    }

    pub(crate) fn next(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Option<PairId> {
        while self.cursor < self.order.len() && pool.is_judged(self.order[self.cursor]) {
            self.cursor += 1;
        }
        let c = pool.collection();
        self.order[self.cursor..]
            .iter()
            .copied()
            .find(|&p| !pool.is_judged(p) && scope.contains(c.topic_of(p)))
    }

    pub(crate) fn order(&self) -> &[PairId] {
        &self.order
    }
}
