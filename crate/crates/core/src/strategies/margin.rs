use std::sync::Arc;

use super::{assemble_labels, FinalLabels, JudgmentPool, OrderedQueue, Strategy, StrategyConfig, StrategyError, StrategyKind, TopicScope};
use crate::calibration::{feature_len, features_into, Calibrator, FitConfig};
use crate::collection::{Collection, PairId};
use crate::grades::{argmax_lowest, top_two, Grade};

/// Pools above this size refit the calibrator every 10 judgments.
pub const LARGE_POOL: usize = 50_000;

/// Calibrated-margin selection. Each step picks the unjudged pair whose
/// calibrated distribution has the smallest gap between its two most likely
/// grades, then refits the calibrator on everything judged so far.
pub struct Lara {
    collection: Arc<Collection>,
    classes: usize,
    dim: usize,
    pis: Vec<f64>,
    feats: Vec<f64>,
    calibrator: Calibrator,
    margins: Vec<f64>,
    fit: FitConfig,
    refit_every: usize,
    frozen: bool,
    sample_feats: Vec<f64>,
    sample_labels: Vec<Grade>,
    since_refit: usize,
}

impl Lara {
    pub fn new(collection: Arc<Collection>, config: &StrategyConfig) -> Self {
        let n = collection.len();
        let classes = collection.max_grade as usize + 1;
        let dim = feature_len(collection.max_grade);
        let mut pis = vec![0.0; n * classes];
        let mut feats = vec![0.0; n * dim];
        for id in collection.pair_ids() {
            let pi = collection.pi_or_uniform(id);
            let i = id.0;
            pis[i * classes..(i + 1) * classes].copy_from_slice(pi.probs());
            features_into(pi.probs(), &mut feats[i * dim..(i + 1) * dim]);
        }
        let refit_every = config
            .refit_every
            .unwrap_or(if n > LARGE_POOL { 10 } else { 1 })
            .max(1);
        let mut lara = Self {
            calibrator: Calibrator::identity(collection.max_grade),
            collection,
            classes,
            dim,
            pis,
            feats,
            margins: vec![0.0; n],
            fit: config.calibration,
            refit_every,
            frozen: config.freeze_calibration,
            sample_feats: Vec::new(),
            sample_labels: Vec::new(),
            since_refit: 0,
        };
        lara.recompute_margins(None);
        lara
    }

    /// Refreshes cached margins, skipping pairs already judged in `pool`.
    fn recompute_margins(&mut self, pool: Option<&JudgmentPool>) {
        let mut buf = vec![0.0; self.classes];
        for i in 0..self.margins.len() {
            if pool.is_some_and(|p| p.is_judged(PairId(i))) {
                continue;
            }
            self.calibrator.predict_features(
                &self.pis[i * self.classes..(i + 1) * self.classes],
                &self.feats[i * self.dim..(i + 1) * self.dim],
                &mut buf,
            );
            self.margins[i] = top_two(&buf).2;
        }
    }

    fn refit(&self) -> Calibrator {
        Calibrator::fit_features(
            &self.sample_feats,
            &self.sample_labels,
            self.collection.max_grade,
            &self.fit,
            Some(&self.calibrator),
        )
    }

    /// Calibrated margin of a pair under the current calibrator.
    pub fn margin_of(&self, id: PairId) -> f64 {
        self.margins[id.0]
    }

    pub fn refit_every(&self) -> usize {
        self.refit_every
    }
}

impl Strategy for Lara {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Lara
    }

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError> {
        let mut best: Option<(f64, PairId)> = None;
        for t in scope.topics() {
            for id in self.collection.topic_pairs(t) {
                if pool.is_judged(id) {
                    continue;
                }
                let m = self.margins[id.0];
                if best.is_none_or(|(bm, _)| m < bm) {
                    best = Some((m, id));
                }
            }
        }
        best.map(|(_, id)| id).ok_or(StrategyError::Exhausted)
    }

    fn observe(&mut self, pool: &JudgmentPool, pair: PairId, grade: Grade) {
        let i = pair.0;
        self.sample_feats
            .extend_from_slice(&self.feats[i * self.dim..(i + 1) * self.dim]);
        self.sample_labels.push(grade);
        if self.frozen {
            return;
        }
        self.since_refit += 1;
        if self.since_refit >= self.refit_every {
            self.since_refit = 0;
            let next = self.refit();
            if next != self.calibrator {
                self.calibrator = next;
                self.recompute_margins(Some(pool));
            }
        }
    }

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        let cal = if self.since_refit > 0 && !self.frozen {
            self.refit()
        } else {
            self.calibrator.clone()
        };
        let mut buf = vec![0.0; self.classes];
        assemble_labels(pool, |id| {
            let i = id.0;
            cal.predict_features(
                &self.pis[i * self.classes..(i + 1) * self.classes],
                &self.feats[i * self.dim..(i + 1) * self.dim],
                &mut buf,
            );
            argmax_lowest(&buf) as Grade
        })
    }

    fn calibrator(&self) -> Option<Calibrator> {
        Some(self.calibrator.clone())
    }
}

/// Uncalibrated margin selection: a fixed order by raw LLM margin.
pub struct Naive {
    collection: Arc<Collection>,
    queue: OrderedQueue,
}

impl Naive {
    pub fn new(collection: Arc<Collection>) -> Self {
        let mut keyed: Vec<(f64, PairId)> = collection
            .pair_ids()
            .map(|id| (top_two(collection.pi_or_uniform(id).probs()).2, id))
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Self {
            collection,
            queue: OrderedQueue::new(keyed.into_iter().map(|(_, id)| id).collect()),
        }
    }
}

impl Strategy for Naive {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Naive
    }

    fn next_pair(&mut self, pool: &JudgmentPool, scope: &TopicScope) -> Result<PairId, StrategyError> {
        self.queue.next(pool, scope).ok_or(StrategyError::Exhausted)
    }

    fn observe(&mut self, _pool: &JudgmentPool, _pair: PairId, _grade: Grade) {}

    fn finalize(&self, pool: &JudgmentPool) -> FinalLabels {
        assemble_labels(pool, |id| self.collection.pi_or_uniform(id).argmax())
    }
}
