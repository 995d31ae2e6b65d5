use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, Utc};
use lara_core::engine::BudgetRatio;
use lara_core::strategies::{Assessors, SelectionSession, SessionSnapshot, StrategyConfig, StrategyError};
use lara_core::trec_io::{write_qrels, JudgmentLog, PairKey, TrecError};
use lara_core::{Collection, Grade, GradeVector, PairId};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, SystemClock};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("collection {0} is not registered")]
    UnknownCollection(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("session {0} already exists")]
    SessionExists(String),
    #[error("assessor {0} is not part of this session")]
    UnknownAssessor(String),
    #[error("the budget of group {group} is spent")]
    GroupBudgetExhausted { group: usize },
    #[error("group {current} is still in progress; assessor's group {group} has not started")]
    AwaitingGroup { group: usize, current: usize },
    #[error("pair is leased to {holder} until {until}")]
    AssignmentHeld { holder: String, until: DateTime<Utc> },
    #[error("session has no pairs left to judge")]
    Exhausted,
    #[error("no pending assignment for this assessor and pair")]
    NoPendingAssignment,
    #[error("lease expired and the pair was reissued")]
    StaleAssignment,
    #[error("grade {grade} is outside 0..={max_grade}")]
    GradeOutOfRange { grade: u32, max_grade: Grade },
    #[error("pair {topic}/{doc} is not in the pool")]
    UnknownPair { topic: String, doc: String },
    #[error("session is still active; pass force to finalize early")]
    SessionNotFinalizable,
    #[error("session is not finalized")]
    NotFinalized,
    #[error("recovery of session {id} failed: {reason}")]
    Recovery { id: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Trec(#[from] TrecError),
    #[error("strategy: {0}")]
    Strategy(#[from] StrategyError),
}

impl ServiceError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::SessionNotFound(_) => "SessionNotFound",
            ServiceError::UnknownCollection(_) => "UnknownCollection",
            ServiceError::InvalidConfig(_) => "InvalidConfig",
            ServiceError::SessionExists(_) => "SessionExists",
            ServiceError::UnknownAssessor(_) => "UnknownAssessor",
            ServiceError::GroupBudgetExhausted { .. } => "GroupBudgetExhausted",
            ServiceError::AwaitingGroup { .. } => "AwaitingGroup",
            ServiceError::AssignmentHeld { .. } => "AssignmentHeld",
            ServiceError::Exhausted => "Exhausted",
            ServiceError::NoPendingAssignment => "NoPendingAssignment",
            ServiceError::StaleAssignment => "StaleAssignment",
            ServiceError::GradeOutOfRange { .. } => "GradeOutOfRange",
            ServiceError::UnknownPair { .. } => "UnknownPair",
            ServiceError::SessionNotFinalizable => "SessionNotFinalizable",
            ServiceError::NotFinalized => "NotFinalized",
            ServiceError::Recovery { .. } => "RecoveryFailed",
            ServiceError::Io(_) | ServiceError::Trec(_) | ServiceError::Strategy(_) => "Internal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Exhausted,
    Finalized,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub lease: Duration,
    /// Let any assessor take the current group's pair.
    pub allow_cross_group: bool,
    /// Seed for sessions created without one.
    pub default_seed: u64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            lease: Duration::minutes(30),
            allow_cross_group: false,
            default_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub id: Option<String>,
    pub collection: String,
    pub strategy: StrategyConfig,
    /// Overrides `strategy.assessors`.
    #[serde(default)]
    pub n: Option<Assessors>,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub budget_ratio: Option<BudgetRatio>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Assessor `i` works on group `i mod n`. Without a list any assessor
    /// may take whichever group is current.
    #[serde(default)]
    pub assessors: Option<Vec<String>>,
}

/// Persisted alongside the judgment log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionMeta {
    id: String,
    collection: String,
    collection_fingerprint: String,
    strategy: StrategyConfig,
    budget: usize,
    seed: u64,
    assessors: Option<Vec<String>>,
    created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeaseView {
    pub assessor: String,
    pub topic: String,
    pub doc: String,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub id: String,
    pub collection: String,
    pub method: String,
    pub status: Status,
    pub judged: usize,
    pub budget: usize,
    pub max_grade: Grade,
    pub groups: Vec<GroupView>,
    /// `None` once every group is done.
    pub current_group: Option<usize>,
    pub lease: Option<LeaseView>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupView {
    pub topics: Vec<String>,
    pub budget: usize,
    pub used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub topic: String,
    pub doc: String,
    pub topic_title: String,
    pub topic_description: String,
    pub document_text: String,
    pub group: Option<usize>,
    pub issued_at: DateTime<Utc>,
    pub expires_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Progress {
    pub judged: usize,
    pub budget: usize,
    pub status: Status,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinalizeSummary {
    pub pairs: usize,
    pub human: usize,
    pub predicted: usize,
    pub export: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    /// Calibrated probability of each grade.
    pub p: Vec<f64>,
}

/// Calibrated output along a grid of inputs. Point `x` for grade `k` puts
/// mass `x` on `k` and spreads the rest evenly over the other grades.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationCurve {
    pub identity: bool,
    pub samples: usize,
    pub max_grade: Grade,
    pub curves: BTreeMap<Grade, Vec<CurvePoint>>,
}

#[derive(Debug, Clone)]
struct Lease {
    assessor: String,
    pair: PairId,
    issued_at: DateTime<Utc>,
    expires_at: DateTime<Utc>,
}

struct Live {
    meta: SessionMeta,
    dir: PathBuf,
    session: SelectionSession,
    log: JudgmentLog,
    lease: Option<Lease>,
    /// Assessors whose lease lapsed and was handed to someone else.
    superseded: HashMap<String, PairId>,
    status: Status,
    export: Option<String>,
}

struct Handle {
    live: Mutex<Live>,
    view: RwLock<Arc<SessionView>>,
}

pub struct Manager {
    config: ServiceConfig,
    collections: HashMap<String, Arc<Collection>>,
    sessions: RwLock<BTreeMap<String, Arc<Handle>>>,
    clock: Arc<dyn Clock>,
}

const META: &str = "session.json";
const LOG: &str = "judgments.jsonl";
const EXPORT: &str = "export.qrels";

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 128 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Live {
    fn refresh_status(&mut self) -> Result<(), ServiceError> {
        if self.status == Status::Finalized {
            return Ok(());
        }
        self.status = match self.session.propose() {
            Ok(_) => Status::Active,
            Err(StrategyError::Exhausted) => Status::Exhausted,
            Err(e) => return Err(e.into()),
        };
        Ok(())
    }

    fn view(&self) -> SessionView {
        let c = self.session.pool().collection();
        let plan = self.session.plan();
        let usage = self.session.group_usage();
        let groups = plan
            .groups
            .iter()
            .zip(&plan.budgets)
            .zip(usage)
            .map(|((g, &budget), &used)| GroupView {
                topics: g.iter().map(|&t| c.topic_ids()[t].clone()).collect(),
                budget,
                used,
            })
            .collect();
        let current = self.session.current_group();
        SessionView {
            id: self.meta.id.clone(),
            collection: self.meta.collection.clone(),
            method: self.meta.strategy.label(),
            status: self.status,
            judged: self.session.pool().judged_count(),
            budget: self.session.pool().budget(),
            max_grade: c.max_grade,
            groups,
            current_group: (current < plan.groups.len()).then_some(current),
            lease: self.lease.as_ref().map(|l| LeaseView {
                assessor: l.assessor.clone(),
                topic: c.pair(l.pair).topic.clone(),
                doc: c.pair(l.pair).doc.clone(),
                issued_at: l.issued_at,
                expires_at: l.expires_at,
            }),
        }
    }

    fn assessor_group(&self, assessor: &str) -> Result<Option<usize>, ServiceError> {
        let Some(list) = &self.meta.assessors else {
            return Ok(None);
        };
        let i = list
            .iter()
            .position(|a| a == assessor)
            .ok_or_else(|| ServiceError::UnknownAssessor(assessor.to_string()))?;
        Ok(Some(i % self.session.plan().groups.len().max(1)))
    }
}

impl Manager {
    /// Opens the data directory, replaying every persisted session.
    pub fn open(
        config: ServiceConfig,
        collections: HashMap<String, Arc<Collection>>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(&config.data_dir)?;
        let m = Self {
            config,
            collections,
            sessions: RwLock::new(BTreeMap::new()),
            clock,
        };
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&m.config.data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(META).is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let handle = m.recover(&dir)?;
            let id = handle.live.lock().unwrap().meta.id.clone();
            m.sessions.write().unwrap().insert(id, Arc::new(handle));
        }
        Ok(m)
    }

    pub fn with_system_clock(
        config: ServiceConfig,
        collections: HashMap<String, Arc<Collection>>,
    ) -> Result<Self, ServiceError> {
        Self::open(config, collections, Arc::new(SystemClock))
    }

    fn recover(&self, dir: &Path) -> Result<Handle, ServiceError> {
        let fail = |id: &str, reason: String| ServiceError::Recovery { id: id.to_string(), reason };
        let text = std::fs::read_to_string(dir.join(META))?;
        let meta: SessionMeta =
            serde_json::from_str(&text).map_err(|e| fail(&dir.display().to_string(), e.to_string()))?;
        let collection = self
            .collections
            .get(&meta.collection)
            .ok_or_else(|| fail(&meta.id, format!("collection {} is not registered", meta.collection)))?
            .clone();
        if collection.fingerprint() != meta.collection_fingerprint {
            return Err(fail(&meta.id, "collection contents changed since the session started".into()));
        }
        let log = JudgmentLog::open(dir.join(LOG), &meta.id)?;
        let snapshot = SessionSnapshot {
            strategy: meta.strategy.clone(),
            seed: meta.seed,
            budget: meta.budget,
            judgments: log
                .entries()
                .iter()
                .map(|e| (PairKey::new(&e.topic_id, &e.doc_id), e.grade))
                .collect(),
        };
        let session = SelectionSession::restore(collection, &snapshot).map_err(|e| fail(&meta.id, e.to_string()))?;
        let export = match std::fs::read_to_string(dir.join(EXPORT)) {
            Ok(t) => Some(t),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut live = Live {
            meta,
            dir: dir.to_path_buf(),
            session,
            log,
            lease: None,
            superseded: HashMap::new(),
            status: if export.is_some() { Status::Finalized } else { Status::Active },
            export,
        };
        live.refresh_status()?;
        let view = RwLock::new(Arc::new(live.view()));
        Ok(Handle {
            live: Mutex::new(live),
            view,
        })
    }

    fn handle(&self, id: &str) -> Result<Arc<Handle>, ServiceError> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_string()))
    }

    /// Runs `f` under the session's writer lock and republishes its view.
    fn mutate<T>(&self, id: &str, f: impl FnOnce(&mut Live) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let h = self.handle(id)?;
        let mut live = h.live.lock().unwrap();
        let out = f(&mut live);
        *h.view.write().unwrap() = Arc::new(live.view());
        out
    }

    pub fn collection_names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.collections.keys().cloned().collect();
        v.sort();
        v
    }

    pub fn create_session(&self, req: CreateSession) -> Result<SessionView, ServiceError> {
        let collection = self
            .collections
            .get(&req.collection)
            .ok_or_else(|| ServiceError::UnknownCollection(req.collection.clone()))?
            .clone();
        let budget = match (req.budget, req.budget_ratio) {
            (Some(b), None) => b,
            (None, Some(r)) => r.budget(collection.len()),
            _ => return Err(ServiceError::InvalidConfig("give exactly one of budget and budget_ratio".into())),
        };
        let mut strategy = req.strategy.clone();
        if let Some(n) = req.n {
            strategy.assessors = n;
        }
        let n = strategy.assessors.resolve(collection.topic_count());
        if n == 0 || n > collection.topic_count() {
            return Err(ServiceError::InvalidConfig(format!(
                "n = {n} must be between 1 and the topic count {}",
                collection.topic_count()
            )));
        }
        if let Some(list) = &req.assessors {
            if list.is_empty() || list.iter().any(|a| a.is_empty()) {
                return Err(ServiceError::InvalidConfig("assessor ids must be non-empty".into()));
            }
        }
        let id = req.id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
        if !valid_id(&id) {
            return Err(ServiceError::InvalidConfig(format!("session id {id:?} must be [A-Za-z0-9_-]+")));
        }
        let seed = req.seed.unwrap_or(self.config.default_seed);
        let session = SelectionSession::new(collection.clone(), &strategy, budget, seed)
            .map_err(|e| ServiceError::InvalidConfig(e.to_string()))?;

        let mut sessions = self.sessions.write().unwrap();
        let dir = self.config.data_dir.join(&id);
        if sessions.contains_key(&id) || dir.exists() {
            return Err(ServiceError::SessionExists(id));
        }
        std::fs::create_dir_all(&dir)?;
        let meta = SessionMeta {
            id: id.clone(),
            collection: req.collection,
            collection_fingerprint: collection.fingerprint(),
            strategy,
            budget: session.pool().budget(),
            seed,
            assessors: req.assessors,
            created_at: self.clock.now(),
        };
        let log = JudgmentLog::open(dir.join(LOG), &id)?;
        write_atomic(&dir.join(META), &serde_json::to_vec_pretty(&meta).map_err(std::io::Error::other)?)?;
        let mut live = Live {
            meta,
            dir,
            session,
            log,
            lease: None,
            superseded: HashMap::new(),
            status: Status::Active,
            export: None,
        };
        live.refresh_status()?;
        let view = live.view();
        sessions.insert(
            id,
            Arc::new(Handle {
                live: Mutex::new(live),
                view: RwLock::new(Arc::new(view.clone())),
            }),
        );
        Ok(view)
    }

    /// Latest published state; never waits on a writer.
    pub fn view(&self, id: &str) -> Result<Arc<SessionView>, ServiceError> {
        Ok(self.handle(id)?.view.read().unwrap().clone())
    }

    pub fn next_item(&self, id: &str, assessor: &str) -> Result<Assignment, ServiceError> {
        let now = self.clock.now();
        let lease_len = self.config.lease;
        let cross = self.config.allow_cross_group;
        self.mutate(id, |live| {
            if assessor.is_empty() {
                return Err(ServiceError::UnknownAssessor(String::new()));
            }
            if live.status != Status::Active {
                return Err(ServiceError::Exhausted);
            }
            let proposal = live.session.pending().expect("active session has a proposal");
            let mine = live.assessor_group(assessor)?;
            if let (Some(g), Some(current), false) = (mine, proposal.group, cross) {
                if g < current {
                    return Err(ServiceError::GroupBudgetExhausted { group: g });
                }
                if g > current {
                    return Err(ServiceError::AwaitingGroup { group: g, current });
                }
            }
            match &live.lease {
                Some(l) if l.assessor == assessor && l.pair == proposal.pair && l.expires_at > now => {}
                Some(l) if l.expires_at > now => {
                    return Err(ServiceError::AssignmentHeld {
                        holder: l.assessor.clone(),
                        until: l.expires_at,
                    })
                }
                other => {
                    if let Some(old) = other {
                        if old.assessor != assessor {
                            live.superseded.insert(old.assessor.clone(), old.pair);
                        }
                    }
                    live.superseded.remove(assessor);
                    live.lease = Some(Lease {
                        assessor: assessor.to_string(),
                        pair: proposal.pair,
                        issued_at: now,
                        expires_at: now + lease_len,
                    });
                }
            }
            let lease = live.lease.as_ref().unwrap();
            let c = live.session.pool().collection();
            let key = c.pair(proposal.pair);
            let topic = c.topic_text(&key.topic);
            Ok(Assignment {
                topic: key.topic.clone(),
                doc: key.doc.clone(),
                topic_title: topic.map(|t| t.title.clone()).unwrap_or_default(),
                topic_description: topic.map(|t| t.description.clone()).unwrap_or_default(),
                document_text: c.doc_text(&key.doc).unwrap_or_default().to_string(),
                group: proposal.group,
                issued_at: lease.issued_at,
                expires_at: lease.expires_at,
            })
        })
    }

    pub fn submit_judgment(
        &self,
        id: &str,
        assessor: &str,
        key: &PairKey,
        grade: u32,
    ) -> Result<Progress, ServiceError> {
        let now = self.clock.now();
        self.mutate(id, |live| {
            let c = live.session.pool().collection().clone();
            let pair = c.lookup(key).ok_or_else(|| ServiceError::UnknownPair {
                topic: key.topic.clone(),
                doc: key.doc.clone(),
            })?;
            if grade > u32::from(c.max_grade) {
                return Err(ServiceError::GradeOutOfRange {
                    grade,
                    max_grade: c.max_grade,
                });
            }
            let holds = live.lease.as_ref().is_some_and(|l| l.assessor == assessor && l.pair == pair);
            if !holds {
                if live.superseded.get(assessor) == Some(&pair) {
                    live.superseded.remove(assessor);
                    return Err(ServiceError::StaleAssignment);
                }
                return Err(ServiceError::NoPendingAssignment);
            }
            if live.status != Status::Active {
                return Err(ServiceError::Exhausted);
            }
            let grade = grade as Grade;
            // Write-ahead: the judgment is durable before the strategy sees it.
            live.log.append(key, grade, assessor, now)?;
            live.session.record(pair, grade)?;
            live.lease = None;
            live.refresh_status()?;
            Ok(Progress {
                judged: live.session.pool().judged_count(),
                budget: live.session.pool().budget(),
                status: live.status,
            })
        })
    }

    pub fn finalize(&self, id: &str, force: bool) -> Result<FinalizeSummary, ServiceError> {
        self.mutate(id, |live| {
            let c = live.session.pool().collection().clone();
            let labels = live.session.finalize();
            let summary = |export: String| FinalizeSummary {
                pairs: c.len(),
                human: labels.human.len(),
                predicted: labels.predicted.len(),
                export,
            };
            let url = format!("/sessions/{}/export", live.meta.id);
            match live.status {
                Status::Finalized => return Ok(summary(url)),
                Status::Active if !force => return Err(ServiceError::SessionNotFinalizable),
                _ => {}
            }
            let mut bytes = Vec::new();
            write_qrels(c.pairs(), &labels, &mut bytes)?;
            write_atomic(&live.dir.join(EXPORT), &bytes)?;
            live.export = Some(String::from_utf8(bytes).expect("qrels are utf-8"));
            live.status = Status::Finalized;
            live.lease = None;
            Ok(summary(url))
        })
    }

    pub fn export(&self, id: &str) -> Result<String, ServiceError> {
        let h = self.handle(id)?;
        let live = h.live.lock().unwrap();
        live.export.clone().ok_or(ServiceError::NotFinalized)
    }

    pub fn calibration(&self, id: &str, points: usize) -> Result<CalibrationCurve, ServiceError> {
        let h = self.handle(id)?;
        let live = h.live.lock().unwrap();
        let l = live.session.pool().collection().max_grade;
        let cal = live.session.calibrator();
        let points = points.clamp(2, 101);
        let mut curves = BTreeMap::new();
        for k in 0..=l {
            let mut curve = Vec::with_capacity(points);
            for i in 0..points {
                // Keep clear of the exact endpoints, where logits are clipped.
                let x = 0.01 + 0.98 * i as f64 / (points - 1) as f64;
                let rest = (1.0 - x) / f64::from(l);
                let probs: Vec<f64> = (0..=l).map(|j| if j == k { x } else { rest }).collect();
                let pi = GradeVector::new(probs).expect("grid point is a distribution");
                let p = match &cal {
                    Some(c) => c.predict(&pi).probs().to_vec(),
                    None => pi.probs().to_vec(),
                };
                curve.push(CurvePoint { x, p });
            }
            curves.insert(k, curve);
        }
        Ok(CalibrationCurve {
            identity: cal.as_ref().is_none_or(|c| c.is_identity()),
            samples: live.session.pool().judged_count(),
            max_grade: l,
            curves,
        })
    }

    /// Replayable strategy state, for recovery checks.
    pub fn snapshot(&self, id: &str) -> Result<SessionSnapshot, ServiceError> {
        Ok(self.handle(id)?.live.lock().unwrap().session.snapshot())
    }

    pub fn calibrator(&self, id: &str) -> Result<Option<lara_core::calibration::Calibrator>, ServiceError> {
        Ok(self.handle(id)?.live.lock().unwrap().session.calibrator())
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }
}
