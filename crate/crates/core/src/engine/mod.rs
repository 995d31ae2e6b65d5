//! Experiment orchestration: sessions against an oracle, scoring of the
//! resulting labels, budget sweeps and reports.

mod config;
mod report;
mod sweep;

use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collection::{Collection, CollectionError};
use crate::grades::Grade;
use crate::metrics::{compare_rankings, score_systems, Metric, MetricError, RankingComparison, SystemScore};
use crate::simulation::{OracleAnnotator, SimulationError};
use crate::strategies::{FinalLabels, SelectionSession, SessionSnapshot, StrategyConfig, StrategyError};
use crate::trec_io::{JudgmentLog, JudgmentLogEntry, PairKey, TrecError};

pub use config::{BudgetRatio, CollectionSource, ExperimentConfig, DEFAULT_RATIOS};
pub use report::{emit_report, write_text_table, MeanRow, ReportFiles};
pub use sweep::{cell_key, run_sweep, CellTiming, SweepOptions, SweepReport, SweepRow};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Collection(#[from] CollectionError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error("session {session}: {source}")]
    Strategy {
        session: String,
        #[source]
        source: StrategyError,
    },
    #[error("session {session}: oracle failed on ({topic}, {doc}): {reason}")]
    Oracle {
        session: String,
        topic: String,
        doc: String,
        reason: String,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Trec(#[from] TrecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One judgment as it happened during a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub topic_id: String,
    pub doc_id: String,
    pub grade: Grade,
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub labels: FinalLabels,
    pub trace: Vec<TraceEntry>,
    pub snapshot: SessionSnapshot,
}

/// Runs a strategy to budget exhaustion, asking `oracle` for every grade.
pub fn run_session<E: std::fmt::Display>(
    collection: &Arc<Collection>,
    strategy: &StrategyConfig,
    budget: usize,
    seed: u64,
    mut oracle: impl FnMut(&PairKey) -> Result<Grade, E>,
) -> Result<SessionOutcome, EngineError> {
    let name = format!("{}/seed={seed}/B={budget}", strategy.label());
    let ctx = |source| EngineError::Strategy {
        session: name.clone(),
        source,
    };
    let mut session = SelectionSession::new(collection.clone(), strategy, budget, seed).map_err(ctx)?;
    let mut trace = Vec::new();
    loop {
        let proposal = match session.propose() {
            Ok(p) => p,
            Err(StrategyError::Exhausted) => break,
            Err(e) => return Err(ctx(e)),
        };
        let key = collection.pair(proposal.pair);
        let grade = oracle(key).map_err(|e| EngineError::Oracle {
            session: name.clone(),
            topic: key.topic.clone(),
            doc: key.doc.clone(),
            reason: e.to_string(),
        })?;
        session.record(proposal.pair, grade).map_err(ctx)?;
        trace.push(TraceEntry {
            topic_id: key.topic.clone(),
            doc_id: key.doc.clone(),
            grade,
            group: proposal.group,
        });
    }
    Ok(SessionOutcome {
        labels: session.finalize(),
        trace,
        snapshot: session.snapshot(),
    })
}

/// `run_session` with the qrels oracle.
pub fn run_oracle_session(
    collection: &Arc<Collection>,
    strategy: &StrategyConfig,
    budget: usize,
    seed: u64,
    oracle: &OracleAnnotator,
) -> Result<SessionOutcome, EngineError> {
    run_session(collection, strategy, budget, seed, |k| oracle.judge(&k.topic, &k.doc))
}

/// Rebuilds final labels from a trace, checking that the strategy proposes
/// the same pairs in the same order.
pub fn replay_trace(
    collection: &Arc<Collection>,
    strategy: &StrategyConfig,
    budget: usize,
    seed: u64,
    trace: &[TraceEntry],
) -> Result<FinalLabels, EngineError> {
    let snapshot = SessionSnapshot {
        strategy: strategy.clone(),
        seed,
        budget,
        judgments: trace
            .iter()
            .map(|t| (PairKey::new(&t.topic_id, &t.doc_id), t.grade))
            .collect(),
    };
    let session = SelectionSession::restore(collection.clone(), &snapshot).map_err(|source| EngineError::Strategy {
        session: strategy.label(),
        source,
    })?;
    Ok(session.finalize())
}

/// Writes a trace in judgment-log format. Timestamps count seconds from the
/// epoch so traces are reproducible byte for byte.
pub fn write_trace(trace: &[TraceEntry], session_id: &str, path: &std::path::Path) -> Result<Vec<JudgmentLogEntry>, EngineError> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let mut log = JudgmentLog::open(path, session_id)?;
    let mut out = Vec::with_capacity(trace.len());
    for (i, t) in trace.iter().enumerate() {
        let ts: DateTime<Utc> = Utc.timestamp_opt(i as i64, 0).unwrap();
        out.push(log.append(&PairKey::new(&t.topic_id, &t.doc_id), t.grade, "oracle", ts)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub comparison: RankingComparison,
    /// Agreement on the pairs that did not receive a human grade; `None` when
    /// every pair was judged.
    pub overlap: Option<f64>,
    pub n_human: usize,
    pub n_predicted: usize,
}

/// Ground-truth system scores for a collection, computed once and reused for
/// every cell.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    collection: Arc<Collection>,
    metric: Metric,
    cutoff: usize,
    truth: Vec<SystemScore>,
}

impl ScoringContext {
    pub fn new(collection: Arc<Collection>, metric: Metric, cutoff: usize) -> Self {
        let truth = score_systems(&collection, collection.truth_grades(), metric, cutoff);
        Self {
            collection,
            metric,
            cutoff,
            truth,
        }
    }

    pub fn truth_scores(&self) -> &[SystemScore] {
        &self.truth
    }

    pub fn score(&self, labels: &FinalLabels) -> Result<CellScore, EngineError> {
        score_collection(&self.collection, labels, &self.truth, self.metric, self.cutoff)
    }
}

/// Scores systems under `labels` and compares their ordering with the
/// ordering under the true qrels.
pub fn score_collection(
    collection: &Collection,
    labels: &FinalLabels,
    truth_scores: &[SystemScore],
    metric: Metric,
    cutoff: usize,
) -> Result<CellScore, EngineError> {
    let n = collection.len();
    if !labels.covers(n) {
        return Err(EngineError::Config("label set does not cover the pool".into()));
    }
    let dense = labels.dense(n);
    let eval = score_systems(collection, &dense, metric, cutoff);
    let comparison = compare_rankings(truth_scores, &eval)?;
    let overlap = (!labels.predicted.is_empty()).then(|| {
        crate::metrics::overlap_of(labels.predicted.iter().map(|(id, &g)| (collection.truth(*id), g)))
    });
    Ok(CellScore {
        comparison,
        overlap,
        n_human: labels.human.len(),
        n_predicted: labels.predicted.len(),
    })
}
