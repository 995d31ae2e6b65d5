use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{plan_groups, FinalLabels, GroupingPlan, JudgmentPool, Strategy, StrategyConfig, StrategyError, TopicScope};
use crate::calibration::Calibrator;
use crate::collection::{Collection, PairId};
use crate::grades::Grade;
use crate::trec_io::PairKey;

/// A pair handed out for judgment. `group` is `None` during the final
/// catch-up phase that spends budget left over once every group ran out of
/// candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub pair: PairId,
    pub group: Option<usize>,
}

/// Serializable session state: configuration plus the judgment sequence.
/// Strategies evolve deterministically, so replaying the sequence rebuilds
/// every internal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub strategy: StrategyConfig,
    pub seed: u64,
    pub budget: usize,
    pub judgments: Vec<(PairKey, Grade)>,
}

/// Drives one strategy through a grouped budget: groups are served strictly
/// in order, each until its share is spent or its topics run dry. Unspent
/// share rolls over to the next group.
pub struct SelectionSession {
    config: StrategyConfig,
    pool: JudgmentPool,
    strategy: Box<dyn Strategy>,
    plan: GroupingPlan,
    scopes: Vec<TopicScope>,
    all_topics: TopicScope,
    group: usize,
    used: Vec<usize>,
    carry: usize,
    pending: Option<Proposal>,
}

impl SelectionSession {
    pub fn new(
        collection: Arc<Collection>,
        config: &StrategyConfig,
        budget: usize,
        seed: u64,
    ) -> Result<Self, StrategyError> {
        let topics = collection.topic_count();
        let n = config.assessors.resolve(topics);
        let pool = JudgmentPool::new(collection.clone(), budget, seed);
        let plan = plan_groups(topics, n, pool.budget(), seed)?;
        let scopes = plan.groups.iter().map(|g| TopicScope::only(topics, g)).collect();
        let strategy = config.build(&collection, seed);
        Ok(Self {
            config: config.clone(),
            pool,
            strategy,
            scopes,
            all_topics: TopicScope::all(topics),
            used: vec![0; plan.groups.len()],
            plan,
            group: 0,
            carry: 0,
            pending: None,
        })
    }

    /// Rebuilds a session by replaying a snapshot's judgments.
    pub fn restore(collection: Arc<Collection>, snapshot: &SessionSnapshot) -> Result<Self, StrategyError> {
        let mut s = Self::new(collection, &snapshot.strategy, snapshot.budget, snapshot.seed)?;
        for (i, (key, grade)) in snapshot.judgments.iter().enumerate() {
            let expected = s.pool.collection().lookup(key);
            let proposal = s.propose().map_err(|_| StrategyError::ReplayDiverged(i))?;
            if Some(proposal.pair) != expected {
                return Err(StrategyError::ReplayDiverged(i));
            }
            s.record(proposal.pair, *grade)?;
        }
        Ok(s)
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        let c = self.pool.collection();
        SessionSnapshot {
            strategy: self.config.clone(),
            seed: self.pool.seed(),
            budget: self.pool.budget(),
            judgments: self
                .pool
                .judgment_order()
                .iter()
                .map(|&p| (c.pair(p).clone(), self.pool.judged_grade(p).unwrap()))
                .collect(),
        }
    }

    /// Next pair to judge. Repeated calls without an intervening `record`
    /// return the same proposal.
    pub fn propose(&mut self) -> Result<Proposal, StrategyError> {
        if let Some(p) = self.pending {
            return Ok(p);
        }
        if self.pool.remaining_budget() == 0 {
            return Err(StrategyError::Exhausted);
        }
        while self.group < self.scopes.len() {
            let allowance = self.plan.budgets[self.group] + self.carry;
            let used = self.used[self.group];
            if used < allowance {
                match self.strategy.next_pair(&self.pool, &self.scopes[self.group]) {
                    Ok(pair) => {
                        let p = Proposal {
                            pair,
                            group: Some(self.group),
                        };
                        self.pending = Some(p);
                        return Ok(p);
                    }
                    Err(StrategyError::Exhausted) => {}
                    Err(e) => return Err(e),
                }
            }
            self.carry = allowance.saturating_sub(used);
            self.group += 1;
        }
        let pair = self.strategy.next_pair(&self.pool, &self.all_topics)?;
        let p = Proposal { pair, group: None };
        self.pending = Some(p);
        Ok(p)
    }

    /// Applies the judgment for the outstanding proposal.
    pub fn record(&mut self, pair: PairId, grade: Grade) -> Result<(), StrategyError> {
        let proposal = match self.pending {
            Some(p) if p.pair == pair => p,
            _ if pair.0 >= self.pool.len() => return Err(StrategyError::UnknownPair(pair)),
            _ if self.pool.is_judged(pair) => return Err(StrategyError::DoubleObserve(pair)),
            _ => return Err(StrategyError::NotProposed(pair)),
        };
        self.pool.record(pair, grade)?;
        self.strategy.observe(&self.pool, pair, grade);
        if let Some(g) = proposal.group {
            self.used[g] += 1;
        }
        self.pending = None;
        Ok(())
    }

    /// Runs to completion against an oracle.
    pub fn run(&mut self, mut oracle: impl FnMut(PairId) -> Grade) -> Result<(), StrategyError> {
        loop {
            match self.propose() {
                Ok(p) => self.record(p.pair, oracle(p.pair))?,
                Err(StrategyError::Exhausted) => return Ok(()),
                Err(e) => return Err(e),
            }
        }
    }

    pub fn finalize(&self) -> FinalLabels {
        self.strategy.finalize(&self.pool)
    }

    pub fn pool(&self) -> &JudgmentPool {
        &self.pool
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.config
    }

    pub fn plan(&self) -> &GroupingPlan {
        &self.plan
    }

    pub fn pending(&self) -> Option<Proposal> {
        self.pending
    }

    /// Index of the group currently being served.
    pub fn current_group(&self) -> usize {
        self.group.min(self.scopes.len())
    }

    pub fn group_usage(&self) -> &[usize] {
        &self.used
    }

    pub fn calibrator(&self) -> Option<Calibrator> {
        self.strategy.calibrator()
    }

    pub fn strategy(&self) -> &dyn Strategy {
        self.strategy.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::collection;
    use super::super::{Assessors, StrategyKind};
    use super::*;

    fn three_topics() -> Arc<Collection> {
        let mut pairs = Vec::new();
        let names: Vec<String> = (0..12).map(|i| format!("d{i}")).collect();
        for (i, d) in names.iter().enumerate() {
            let t = ["1", "2", "3"][i % 3];
            pairs.push((t, d.as_str(), (i % 2) as Grade, 0.1 + 0.07 * i as f64));
        }
        collection(&pairs, &[])
    }

    #[test]
    fn groups_run_in_sequence() {
        let c = three_topics();
        let cfg = StrategyConfig::new(StrategyKind::Naive).with_assessors(Assessors::Count(3));
        let mut s = SelectionSession::new(c.clone(), &cfg, 7, 5).unwrap();
        let mut groups = Vec::new();
        while let Ok(p) = s.propose() {
            assert_eq!(s.propose().unwrap(), p);
            groups.push(p.group.unwrap());
            s.record(p.pair, c.truth(p.pair)).unwrap();
        }
        assert_eq!(groups, vec![0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(s.pool().judged_count(), 7);
    }

    #[test]
    fn leftover_budget_rolls_over() {
        let c = three_topics();
        let cfg = StrategyConfig::new(StrategyKind::Random).with_assessors(Assessors::PerTopic);
        let mut s = SelectionSession::new(c.clone(), &cfg, 12, 1).unwrap();
        s.run(|p| c.truth(p)).unwrap();
        assert_eq!(s.pool().judged_count(), 12);
        assert!(s.finalize().predicted.is_empty());
    }

    #[test]
    fn record_requires_proposal() {
        let c = three_topics();
        let cfg = StrategyConfig::new(StrategyKind::Lara);
        let mut s = SelectionSession::new(c.clone(), &cfg, 3, 0).unwrap();
        let p = s.propose().unwrap();
        let other = PairId((p.pair.0 + 1) % 12);
        assert_eq!(s.record(other, 0), Err(StrategyError::NotProposed(other)));
        assert_eq!(s.record(PairId(99), 0), Err(StrategyError::UnknownPair(PairId(99))));
        s.record(p.pair, 1).unwrap();
        assert_eq!(s.record(p.pair, 1), Err(StrategyError::DoubleObserve(p.pair)));
    }

    #[test]
    fn snapshot_replay_matches() {
        let c = three_topics();
        let cfg = StrategyConfig::new(StrategyKind::MmNs).with_assessors(Assessors::Count(2));
        let mut s = SelectionSession::new(c.clone(), &cfg, 9, 11).unwrap();
        for _ in 0..5 {
            let p = s.propose().unwrap();
            s.record(p.pair, c.truth(p.pair)).unwrap();
        }
        let snap = s.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        let back: SessionSnapshot = serde_json::from_str(&json).unwrap();
        let mut r = SelectionSession::restore(c.clone(), &back).unwrap();
        assert_eq!(r.propose().unwrap(), s.propose().unwrap());
        s.run(|p| c.truth(p)).unwrap();
        r.run(|p| c.truth(p)).unwrap();
        assert_eq!(r.finalize(), s.finalize());
    }
}
