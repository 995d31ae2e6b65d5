//! The dataset `D` of topic-document pairs, with everything the strategies and
//! the evaluation need attached: LLM grade vectors, system runs, ground truth
//! and texts.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::BufReader;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grades::{Grade, GradeVector};
use crate::trec_io::{
    self, Document, Manifest, PairKey, ProbRecord, QrelsRecord, RunRecord, Topic, TrecError,
};

/// Dense index of a pair. Pairs are stored sorted by `(topic, doc)`, so
/// ordering by `PairId` is the tie-break order everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairId(pub usize);

#[derive(Debug, Error)]
pub enum CollectionError {
    #[error("{0}")]
    Io(#[from] TrecError),
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("probability record for ({topic}, {doc}) does not match any pooled pair")]
    UnknownProbPair { topic: String, doc: String },
    #[error("duplicate probability record for ({topic}, {doc})")]
    DuplicateProb { topic: String, doc: String },
    #[error("grade vector for ({topic}, {doc}) has max grade {got}, expected {expected}")]
    GradeRangeMismatch {
        topic: String,
        doc: String,
        got: Grade,
        expected: Grade,
    },
    #[error("collection has no pairs")]
    Empty,
}

/// One system's ranked lists. Entries outside the pool are kept as `None`
/// so they still occupy their rank position.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemRun {
    pub tag: String,
    /// Indexed by topic index.
    pub rankings: Vec<Vec<Option<PairId>>>,
}

#[derive(Debug, Clone)]
pub struct Collection {
    pub name: String,
    pub max_grade: Grade,
    pairs: Vec<PairKey>,
    pair_topic: Vec<usize>,
    topics: Vec<String>,
    topic_ranges: Vec<Range<usize>>,
    grade_vectors: Vec<Option<GradeVector>>,
    truth: Vec<Grade>,
    systems: Vec<SystemRun>,
    topic_texts: HashMap<String, Topic>,
    doc_texts: HashMap<String, String>,
    index: HashMap<PairKey, PairId>,
}

impl Collection {
    /// Assembles a collection. The pool is the set of qrels pairs, whose
    /// grades are the ground truth.
    pub fn from_parts(
        name: impl Into<String>,
        max_grade: Grade,
        qrels: &[QrelsRecord],
        runs: &[RunRecord],
        probs: &[ProbRecord],
        topics: Vec<Topic>,
        documents: Vec<Document>,
    ) -> Result<Self, CollectionError> {
        trec_io::check_grade_range(qrels, max_grade)?;
        if qrels.is_empty() {
            return Err(CollectionError::Empty);
        }
        let mut sorted: Vec<&QrelsRecord> = qrels.iter().collect();
        sorted.sort_by(|a, b| (&a.topic_id, &a.doc_id).cmp(&(&b.topic_id, &b.doc_id)));

        let mut pairs = Vec::with_capacity(sorted.len());
        let mut truth = Vec::with_capacity(sorted.len());
        let mut pair_topic = Vec::with_capacity(sorted.len());
        let mut topic_ids: Vec<String> = Vec::new();
        let mut topic_ranges: Vec<Range<usize>> = Vec::new();
        for (i, r) in sorted.iter().enumerate() {
            if topic_ids.last() != Some(&r.topic_id) {
                topic_ids.push(r.topic_id.clone());
                topic_ranges.push(i..i);
            }
            topic_ranges.last_mut().unwrap().end = i + 1;
            pair_topic.push(topic_ids.len() - 1);
            pairs.push(PairKey::new(&r.topic_id, &r.doc_id));
            truth.push(r.grade);
        }
        let index: HashMap<PairKey, PairId> = pairs
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), PairId(i)))
            .collect();
        let topic_index: HashMap<&str, usize> = topic_ids
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();

        let mut grade_vectors = vec![None; pairs.len()];
        for p in probs {
            let key = PairKey::new(&p.topic_id, &p.doc_id);
            let id = index
                .get(&key)
                .ok_or_else(|| CollectionError::UnknownProbPair {
                    topic: key.topic.clone(),
                    doc: key.doc.clone(),
                })?;
            if p.pi.max_grade() != max_grade {
                return Err(CollectionError::GradeRangeMismatch {
                    topic: key.topic,
                    doc: key.doc,
                    got: p.pi.max_grade(),
                    expected: max_grade,
                });
            }
            if grade_vectors[id.0].replace(p.pi.clone()).is_some() {
                return Err(CollectionError::DuplicateProb {
                    topic: key.topic,
                    doc: key.doc,
                });
            }
        }

        // Runs arrive ordered by (tag, topic, rank) from the parser, but
        // accept any order.
        let mut by_tag: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
        for r in runs {
            by_tag.entry(r.system_tag.as_str()).or_default().push(r);
        }
        let mut systems = Vec::with_capacity(by_tag.len());
        for (tag, mut recs) in by_tag {
            recs.sort_by(|a, b| (&a.topic_id, a.rank).cmp(&(&b.topic_id, b.rank)));
            let mut rankings = vec![Vec::new(); topic_ids.len()];
            for r in recs {
                if let Some(&t) = topic_index.get(r.topic_id.as_str()) {
                    rankings[t].push(index.get(&PairKey::new(&r.topic_id, &r.doc_id)).copied());
                }
            }
            systems.push(SystemRun {
                tag: tag.to_string(),
                rankings,
            });
        }

        Ok(Self {
            name: name.into(),
            max_grade,
            pairs,
            pair_topic,
            topics: topic_ids,
            topic_ranges,
            grade_vectors,
            truth,
            systems,
            topic_texts: topics.into_iter().map(|t| (t.id.clone(), t)).collect(),
            doc_texts: documents.into_iter().map(|d| (d.id, d.text)).collect(),
            index,
        })
    }

    /// Loads every file named by a manifest.
    pub fn load(manifest: &Manifest) -> Result<Self, CollectionError> {
        let open = |p: &Path| {
            File::open(p).map(BufReader::new).map_err(|source| CollectionError::Open {
                path: p.display().to_string(),
                source,
            })
        };
        let qrels = trec_io::parse_qrels(open(&manifest.resolve(&manifest.qrels))?)?;
        let mut runs = Vec::new();
        for f in manifest.run_files()? {
            runs.extend(trec_io::parse_run(open(&f)?)?);
        }
        let probs = match &manifest.probs {
            Some(p) => trec_io::read_probs(open(&manifest.resolve(p))?, manifest.max_grade)?,
            None => Vec::new(),
        };
        let topics = match &manifest.topics {
            Some(p) => trec_io::read_topics(open(&manifest.resolve(p))?)?,
            None => Vec::new(),
        };
        let documents = match &manifest.documents {
            Some(p) => trec_io::read_documents(open(&manifest.resolve(p))?)?,
            None => Vec::new(),
        };
        Self::from_parts(
            manifest.name.clone(),
            manifest.max_grade,
            &qrels,
            &runs,
            &probs,
            topics,
            documents,
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[PairKey] {
        &self.pairs
    }

    pub fn pair(&self, id: PairId) -> &PairKey {
        &self.pairs[id.0]
    }

    pub fn pair_ids(&self) -> impl Iterator<Item = PairId> {
        (0..self.pairs.len()).map(PairId)
    }

    pub fn lookup(&self, key: &PairKey) -> Option<PairId> {
        self.index.get(key).copied()
    }

    pub fn topic_ids(&self) -> &[String] {
        &self.topics
    }

    pub fn topic_count(&self) -> usize {
        self.topics.len()
    }

    pub fn topic_of(&self, id: PairId) -> usize {
        self.pair_topic[id.0]
    }

    /// Pairs of topic `t` as a contiguous id range.
    pub fn topic_pairs(&self, t: usize) -> impl Iterator<Item = PairId> {
        self.topic_ranges[t].clone().map(PairId)
    }

    pub fn grade_vector(&self, id: PairId) -> Option<&GradeVector> {
        self.grade_vectors[id.0].as_ref()
    }

    /// The LLM vector, or the uniform vector when the pair was never annotated.
    pub fn pi_or_uniform(&self, id: PairId) -> GradeVector {
        self.grade_vectors[id.0]
            .clone()
            .unwrap_or_else(|| GradeVector::uniform(self.max_grade))
    }

    pub fn truth(&self, id: PairId) -> Grade {
        self.truth[id.0]
    }

    pub fn truth_grades(&self) -> &[Grade] {
        &self.truth
    }

    pub fn systems(&self) -> &[SystemRun] {
        &self.systems
    }

    pub fn topic_text(&self, topic_id: &str) -> Option<&Topic> {
        self.topic_texts.get(topic_id)
    }

    pub fn doc_text(&self, doc_id: &str) -> Option<&str> {
        self.doc_texts.get(doc_id).map(String::as_str)
    }

    /// Content hash over everything that influences an experiment cell.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([self.max_grade]);
        for (i, key) in self.pairs.iter().enumerate() {
            h.update(key.topic.as_bytes());
            h.update([0]);
            h.update(key.doc.as_bytes());
            h.update([0, self.truth[i]]);
            if let Some(pi) = &self.grade_vectors[i] {
                for p in pi.probs() {
                    h.update(p.to_le_bytes());
                }
            }
        }
        for s in &self.systems {
            h.update(s.tag.as_bytes());
            for ranking in &s.rankings {
                h.update((ranking.len() as u64).to_le_bytes());
                for entry in ranking {
                    h.update((entry.map_or(u64::MAX, |p| p.0 as u64)).to_le_bytes());
                }
            }
        }
        for t in &self.topics {
            if let Some(topic) = self.topic_texts.get(t) {
                h.update(topic.title.as_bytes());
                h.update(topic.description.as_bytes());
            }
        }
        for key in &self.pairs {
            if let Some(text) = self.doc_texts.get(&key.doc) {
                h.update(text.as_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(t: &str, d: &str, g: Grade) -> QrelsRecord {
        QrelsRecord {
            topic_id: t.into(),
            doc_id: d.into(),
            grade: g,
        }
    }

    #[test]
    fn builds_sorted_pool() {
        let qrels = vec![q("2", "b", 1), q("1", "z", 0), q("1", "a", 1)];
        let runs = trec_io::parse_run("1 Q0 z 1 2.0 s\n1 Q0 x 2 1.0 s\n2 Q0 b 1 1.0 s\n".as_bytes())
            .unwrap();
        let c = Collection::from_parts("c", 1, &qrels, &runs, &[], vec![], vec![]).unwrap();
        assert_eq!(c.pair(PairId(0)), &PairKey::new("1", "a"));
        assert_eq!(c.pair(PairId(2)), &PairKey::new("2", "b"));
        assert_eq!(c.topic_pairs(0).collect::<Vec<_>>(), vec![PairId(0), PairId(1)]);
        assert_eq!(c.systems()[0].rankings[0], vec![Some(PairId(1)), None]);
        assert_eq!(c.pi_or_uniform(PairId(0)).probs(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_unknown_prob_pairs() {
        let qrels = vec![q("1", "a", 1)];
        let raw = [(0, 0.5), (1, 0.5)].into_iter().collect();
        let probs = vec![ProbRecord::new("1", "nope", raw, 1, "p", "m").unwrap()];
        assert!(matches!(
            Collection::from_parts("c", 1, &qrels, &[], &probs, vec![], vec![]),
            Err(CollectionError::UnknownProbPair { .. })
        ));
    }
}
