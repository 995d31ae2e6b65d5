//! Oracle annotator and synthetic collections with a controllable LLM
//! miscalibration.
//!
//! Every pair gets a latent score `z` with `pi_1 = sigmoid(z)`, drawn so that
//! `p(y >= 1 | z) = sigmoid(a*z + b)` holds exactly. The logistic calibrator can
//! therefore represent the true conditional, which makes its recovery testable.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{logit, sigmoid};
use crate::collection::{Collection, CollectionError};
use crate::grades::{Grade, GradeVector};
use crate::trec_io::{
    write_documents, write_probs, write_qrels_records, write_run, write_topics, Document, Manifest, PairKey,
    ProbRecord, QrelsRecord, RunRecord, Topic, TrecError,
};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("pair ({topic}, {doc}) is not in the qrels")]
    UnknownPair { topic: String, doc: String },
    #[error(transparent)]
    Trec(#[from] TrecError),
    #[error(transparent)]
    Collection(#[from] CollectionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Answers judgment requests from held ground truth.
#[derive(Debug, Clone, Default)]
pub struct OracleAnnotator {
    grades: HashMap<PairKey, Grade>,
}

impl OracleAnnotator {
    pub fn new(qrels: &[QrelsRecord]) -> Self {
        Self {
            grades: qrels
                .iter()
                .map(|r| (PairKey::new(&r.topic_id, &r.doc_id), r.grade))
                .collect(),
        }
    }

    pub fn from_collection(c: &Collection) -> Self {
        Self {
            grades: c
                .pair_ids()
                .map(|id| (c.pair(id).clone(), c.truth(id)))
                .collect(),
        }
    }

    pub fn judge(&self, topic: &str, doc: &str) -> Result<Grade, SimulationError> {
        self.grades
            .get(&PairKey::new(topic, doc))
            .copied()
            .ok_or_else(|| SimulationError::UnknownPair {
                topic: topic.to_string(),
                doc: doc.to_string(),
            })
    }

    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }
}

/// Applies the logit-linear distortion `p -> sigmoid((logit p - b) / a)` to
/// every cumulative `P(y >= k)` of `pi`.
pub fn distort(pi: &GradeVector, a: f64, b: f64) -> GradeVector {
    let probs = pi.probs();
    let l = probs.len() - 1;
    let mut tail: Vec<f64> = (1..=l).map(|k| probs[k..].iter().sum::<f64>()).collect();
    for c in &mut tail {
        *c = sigmoid((logit(c.clamp(1e-300, 1.0 - 1e-16)) - b) / a);
    }
    from_cumulative(&tail)
}

/// Grade vector from `P(y >= k)`, k = 1..=l, assumed non-increasing in k.
fn from_cumulative(tail: &[f64]) -> GradeVector {
    let l = tail.len();
    let mut out = Vec::with_capacity(l + 1);
    out.push(1.0 - tail[0]);
    for k in 1..=l {
        let next = if k < l { tail[k] } else { 0.0 };
        out.push((tail[k - 1] - next).max(0.0));
    }
    let s: f64 = out.iter().sum();
    GradeVector::new(out.iter().map(|p| p / s).collect()).expect("cumulatives form a distribution")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub name: String,
    pub topics: usize,
    pub docs_per_topic: usize,
    pub systems: usize,
    pub max_grade: Grade,
    /// Slope `a` of the true conditional in LLM logit space.
    pub slope: f64,
    /// Offset `b` of the true conditional.
    pub offset: f64,
    /// Spread of the latent score around each class mean.
    pub latent_sd: f64,
    /// Logit gap between successive grade thresholds.
    pub grade_gap: f64,
    pub prevalence_alpha: f64,
    pub prevalence_beta: f64,
    /// Per-system weight on true relevance; evenly spaced in [0, 1] if empty.
    pub qualities: Vec<f64>,
    pub signal_strength: f64,
    /// Ranking depth per system and topic; all documents when unset.
    pub run_depth: Option<usize>,
    pub vocabulary: usize,
    pub doc_length: usize,
    pub topic_terms: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            topics: 30,
            docs_per_topic: 100,
            systems: 20,
            max_grade: 1,
            slope: 4.0,
            offset: -2.0,
            latent_sd: 1.0,
            grade_gap: 1.5,
            prevalence_alpha: 1.0,
            prevalence_beta: 9.0,
            qualities: Vec::new(),
            signal_strength: 2.0,
            run_depth: None,
            vocabulary: 2000,
            doc_length: 60,
            topic_terms: 8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// The reference collection used by the acceptance sweeps.
    pub fn reference(seed: u64) -> Self {
        Self {
            name: "synthetic-reference".into(),
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidConfig(m.to_string()));
        if self.topics == 0 || self.docs_per_topic == 0 || self.systems == 0 {
            return bad("topics, docs_per_topic and systems must be at least 1");
        }
        if self.max_grade == 0 {
            return bad("at least two grades are required");
        }
        if !(self.slope > 0.0 && self.slope.is_finite()) || !self.offset.is_finite() {
            return bad("slope must be positive and offset finite");
        }
        let positive = |v: f64| v > 0.0;
        if !positive(self.latent_sd) || !positive(self.prevalence_alpha) || !positive(self.prevalence_beta) {
            return bad("latent_sd and prevalence parameters must be positive");
        }
        if !self.qualities.is_empty() && self.qualities.len() != self.systems {
            return bad("qualities must list one value per system");
        }
        if self.vocabulary < self.topic_terms.max(1) {
            return bad("vocabulary must be at least topic_terms");
        }
        Ok(())
    }

    /// Per-system qualities. The default spacing is dealt to system tags in
    /// a seeded order so tag order carries no information.
    fn system_qualities(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if !self.qualities.is_empty() {
            return self.qualities.clone();
        }
        if self.systems == 1 {
            return vec![1.0];
        }
        let mut q: Vec<f64> = (0..self.systems)
            .map(|s| s as f64 / (self.systems - 1) as f64)
            .collect();
        q.shuffle(rng);
        q
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCollection {
    pub config: SyntheticConfig,
    pub qrels: Vec<QrelsRecord>,
    pub runs: Vec<RunRecord>,
    pub probs: Vec<ProbRecord>,
    pub topics: Vec<Topic>,
    pub documents: Vec<Document>,
    /// Latent LLM logit per qrels record.
    pub latent: Vec<f64>,
}

pub const PROMPT_ID: &str = "synthetic";
pub const MODEL_ID: &str = "synthetic-llm";

pub fn generate_collection(config: &SyntheticConfig) -> Result<SyntheticCollection, SimulationError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (a, b, sd) = (config.slope, config.offset, config.latent_sd);
    let l = config.max_grade;
    let prevalence = Beta::new(config.prevalence_alpha, config.prevalence_beta)
        .map_err(|e| SimulationError::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let mut qrels = Vec::new();
    let mut probs = Vec::new();
    let mut topics = Vec::new();
    let mut documents = Vec::new();
    let mut latent = Vec::new();
    let mut runs = Vec::new();
    let vocab: Vec<String> = (0..config.vocabulary).map(|i| format!("w{i}")).collect();
    let qualities = config.system_qualities(&mut rng);

    for t in 0..config.topics {
        let topic_id = format!("T{:03}", t + 1);
        let rho: f64 = prevalence.sample(&mut rng).clamp(1e-4, 1.0 - 1e-4);
        // Class-conditional latent means chosen so the posterior is
        // sigmoid(a*z + b) for this topic's prevalence.
        let gap = a * sd * sd;
        let centre = (logit(rho) - b) / a;
        let (mu0, mu1) = (centre - gap / 2.0, centre + gap / 2.0);

        let mut terms: Vec<usize> = (0..config.vocabulary).collect();
        terms.shuffle(&mut rng);
        terms.truncate(config.topic_terms);
        let title = terms.iter().map(|&w| vocab[w].as_str()).collect::<Vec<_>>().join(" ");
        topics.push(Topic {
            id: topic_id.clone(),
            title,
            description: String::new(),
        });

        let mut grades = Vec::with_capacity(config.docs_per_topic);
        for d in 0..config.docs_per_topic {
            let doc_id = format!("{topic_id}-D{:04}", d + 1);
            let relevant = rng.random::<f64>() < rho;
            let mu = if relevant { mu1 } else { mu0 };
            let z = mu + sd * noise.sample(&mut rng);
            // Higher grades via ordered thresholds on the same latent.
            let mut grade: Grade = u8::from(relevant);
            if relevant {
                let base = sigmoid(a * z + b);
                let u: f64 = rng.random();
                for k in 2..=l {
                    let thr = f64::from(k - 1) * config.grade_gap;
                    if u * base < sigmoid(a * z + b - thr) {
                        grade = k;
                    } else {
                        break;
                    }
                }
            }
            let tail: Vec<f64> = (1..=l)
                .map(|k| sigmoid(z - f64::from(k - 1) * config.grade_gap / a))
                .collect();
            let pi = from_cumulative(&tail);
            let raw = pi.probs().iter().enumerate().map(|(g, &p)| (g as Grade, p)).collect();
            probs.push(ProbRecord::new(&topic_id, &doc_id, raw, l, PROMPT_ID, MODEL_ID).expect("valid synthetic pi"));
            qrels.push(QrelsRecord {
                topic_id: topic_id.clone(),
                doc_id: doc_id.clone(),
                grade,
            });
            latent.push(z);
            grades.push(grade);

            let p_topic = if relevant { 0.15 } else { 0.02 };
            let words: Vec<&str> = (0..config.doc_length)
                .map(|_| {
                    if !terms.is_empty() && rng.random::<f64>() < p_topic {
                        vocab[terms[rng.random_range(0..terms.len())]].as_str()
                    } else {
                        vocab[rng.random_range(0..vocab.len())].as_str()
                    }
                })
                .collect();
            documents.push(Document {
                id: doc_id,
                text: words.join(" "),
            });
        }

        let start = qrels.len() - config.docs_per_topic;
        for (s, &q) in qualities.iter().enumerate() {
            let mut scored: Vec<(f64, usize)> = grades
                .iter()
                .enumerate()
                .map(|(i, &g)| (q * config.signal_strength * f64::from(g) + noise.sample(&mut rng), i))
                .collect();
            scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let depth = config.run_depth.unwrap_or(scored.len()).min(scored.len());
            for (rank, &(score, i)) in scored[..depth].iter().enumerate() {
                runs.push(RunRecord {
                    topic_id: topic_id.clone(),
                    doc_id: qrels[start + i].doc_id.clone(),
                    rank: rank as u32 + 1,
                    score,
                    system_tag: format!("sys{:02}", s + 1),
                });
            }
        }
    }

    Ok(SyntheticCollection {
        config: config.clone(),
        qrels,
        runs,
        probs,
        topics,
        documents,
        latent,
    })
}

impl SyntheticCollection {
    pub fn to_collection(&self) -> Result<Collection, SimulationError> {
        Ok(Collection::from_parts(
            &self.config.name,
            self.config.max_grade,
            &self.qrels,
            &self.runs,
            &self.probs,
            self.topics.clone(),
            self.documents.clone(),
        )?)
    }

    pub fn oracle(&self) -> OracleAnnotator {
        OracleAnnotator::new(&self.qrels)
    }

    /// Writes the collection in the standard on-disk formats plus a
    /// `manifest.toml`, returning the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, SimulationError> {
        fs::create_dir_all(dir.join("runs"))?;
        write_qrels_records(&self.qrels, fs::File::create(dir.join("qrels.txt"))?)?;
        write_probs(&self.probs, fs::File::create(dir.join("probs.jsonl"))?)?;
        write_topics(&self.topics, fs::File::create(dir.join("topics.jsonl"))?)?;
        write_documents(&self.documents, fs::File::create(dir.join("documents.jsonl"))?)?;
        let mut by_system: std::collections::BTreeMap<&str, Vec<RunRecord>> = Default::default();
        for r in &self.runs {
            by_system.entry(&r.system_tag).or_default().push(r.clone());
        }
        for (tag, recs) in by_system {
            write_run(&recs, fs::File::create(dir.join("runs").join(format!("{tag}.run")))?)?;
        }
        let manifest = Manifest {
            name: self.config.name.clone(),
            max_grade: self.config.max_grade,
            qrels: "qrels.txt".into(),
            runs: vec!["runs".into()],
            probs: Some("probs.jsonl".into()),
            topics: Some("topics.jsonl".into()),
            documents: Some("documents.jsonl".into()),
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("manifest.toml");
        fs::write(&path, manifest.to_toml())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{score_systems, Metric};

    #[test]
    fn distort_examples() {
        let pi = GradeVector::new(vec![0.3, 0.7]).unwrap();
        let same = distort(&pi, 1.0, 0.0);
        assert!((same.get(1) - 0.7).abs() < 1e-12);
        let half = GradeVector::binary(0.5).unwrap();
        assert!((distort(&half, 2.0, 0.0).get(1) - 0.5).abs() < 1e-12);
        let p = GradeVector::binary(sigmoid(2.0)).unwrap();
        assert!((distort(&p, 2.0, 0.0).get(1) - sigmoid(1.0)).abs() < 1e-12);
        assert!((sigmoid(1.0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn oracle_lookup() {
        let q = vec![QrelsRecord {
            topic_id: "1".into(),
            doc_id: "a".into(),
            grade: 2,
        }];
        let o = OracleAnnotator::new(&q);
        assert_eq!(o.judge("1", "a").unwrap(), 2);
        assert_eq!(o.judge("1", "a").unwrap(), 2);
        assert!(matches!(o.judge("1", "b"), Err(SimulationError::UnknownPair { .. })));
    }

    #[test]
    fn same_seed_same_collection() {
        let cfg = SyntheticConfig {
            topics: 3,
            docs_per_topic: 20,
            systems: 4,
            seed: 9,
            ..Default::default()
        };
        let a = generate_collection(&cfg).unwrap();
        let b = generate_collection(&cfg).unwrap();
        assert_eq!(a.qrels, b.qrels);
        assert_eq!(a.runs, b.runs);
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.documents, b.documents);
        let c = generate_collection(&SyntheticConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.latent, c.latent);
    }

    #[test]
    fn referential_integrity() {
        let cfg = SyntheticConfig {
            topics: 4,
            docs_per_topic: 15,
            systems: 3,
            max_grade: 2,
            run_depth: Some(10),
            ..Default::default()
        };
        let s = generate_collection(&cfg).unwrap();
        let keys: std::collections::HashSet<(String, String)> =
            s.qrels.iter().map(|q| (q.topic_id.clone(), q.doc_id.clone())).collect();
        assert!(s.runs.iter().all(|r| keys.contains(&(r.topic_id.clone(), r.doc_id.clone()))));
        assert!(s.probs.iter().all(|p| keys.contains(&(p.topic_id.clone(), p.doc_id.clone()))));
        assert!(s.qrels.iter().all(|q| q.grade <= 2));
        assert_eq!(s.to_collection().unwrap().len(), 60);
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SyntheticConfig { topics: 0, ..Default::default() },
            SyntheticConfig { max_grade: 0, ..Default::default() },
            SyntheticConfig { slope: 0.0, ..Default::default() },
            SyntheticConfig { qualities: vec![1.0], ..Default::default() },
        ] {
            assert!(matches!(generate_collection(&cfg), Err(SimulationError::InvalidConfig(_))));
        }
    }

    fn bin_rates(slope: f64, offset: f64, seed: u64) -> Vec<(f64, f64, usize)> {
        let cfg = SyntheticConfig {
            topics: 20,
            docs_per_topic: 500,
            systems: 1,
            slope,
            offset,
            prevalence_alpha: 1.0,
            prevalence_beta: 1.0,
            vocabulary: 10,
            doc_length: 1,
            topic_terms: 1,
            seed,
            ..Default::default()
        };
        let s = generate_collection(&cfg).unwrap();
        let mut bins = vec![(0.0, 0usize, 0usize); 10];
        for (p, q) in s.probs.iter().zip(&s.qrels) {
            let x = p.pi.get(1);
            let i = ((x * 10.0) as usize).min(9);
            bins[i].0 += x;
            bins[i].1 += 1;
            bins[i].2 += usize::from(q.grade >= 1);
        }
        bins.into_iter()
            .filter(|b| b.1 > 0)
            .map(|(sx, n, r)| (sx / n as f64, r as f64 / n as f64, n))
            .collect()
    }

    #[test]
    fn identity_distortion_is_calibrated() {
        for (mean_pi, rate, n) in bin_rates(1.0, 0.0, 4) {
            if n >= 300 {
                assert!((rate - mean_pi).abs() < 0.05, "bin {mean_pi}: {rate} over {n}");
            }
        }
    }

    #[test]
    fn steep_distortion_sharpens_relevance() {
        let s = generate_collection(&SyntheticConfig {
            topics: 100,
            docs_per_topic: 1000,
            systems: 1,
            doc_length: 1,
            prevalence_alpha: 1.0,
            prevalence_beta: 1.0,
            slope: 4.0,
            offset: 0.0,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let rate_near = |target: f64| {
            let (mut n, mut r) = (0usize, 0usize);
            for (p, q) in s.probs.iter().zip(&s.qrels) {
                if (p.pi.get(1) - target).abs() < 0.015 {
                    n += 1;
                    r += usize::from(q.grade >= 1);
                }
            }
            r as f64 / n as f64
        };
        assert!((rate_near(0.5) - 0.5).abs() < 0.05);
        assert!((rate_near(0.7) - 0.9711).abs() < 0.05);
    }

    #[test]
    fn better_systems_score_higher() {
        let mut wins = 0;
        for seed in 0..40 {
            let s = generate_collection(&SyntheticConfig {
                topics: 10,
                docs_per_topic: 50,
                systems: 2,
                qualities: vec![0.0, 1.0],
                seed,
                ..Default::default()
            })
            .unwrap();
            let c = s.to_collection().unwrap();
            let scores = score_systems(&c, c.truth_grades(), Metric::Map, 1000);
            if scores[1].mean > scores[0].mean {
                wins += 1;
            }
        }
        assert!(wins >= 38, "{wins}/40");
    }
}
