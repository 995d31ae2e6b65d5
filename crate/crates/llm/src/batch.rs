use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lara_core::trec_io::{read_probs, write_prob_record, Document, PairKey, ProbRecord, Topic};
use lara_core::Grade;
use serde::{Deserialize, Serialize};

use crate::client::{fetch_grade_probs, CompletionClient, DecodingConfig, RetryPolicy};
use crate::extract::GradeTokens;
use crate::prompt::PromptTemplate;
use crate::LlmError;

/// Topic and document texts by id.
#[derive(Debug, Clone, Default)]
pub struct Texts {
    pub topics: HashMap<String, Topic>,
    pub docs: HashMap<String, String>,
}

impl Texts {
    pub fn new(topics: Vec<Topic>, docs: Vec<Document>) -> Self {
        Self {
            topics: topics.into_iter().map(|t| (t.id.clone(), t)).collect(),
            docs: docs.into_iter().map(|d| (d.id, d.text)).collect(),
        }
    }
}

/// What to do when no grade token appears among the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    /// Emit a uniform vector, which LARA will rank first for human review.
    #[default]
    Uniform,
    Skip,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub template: PromptTemplate,
    pub decoding: DecodingConfig,
    pub grade_tokens: GradeTokens,
    pub max_grade: Grade,
    pub fallback: Fallback,
    /// Concurrent requests; at least 1.
    pub workers: usize,
    pub retry: RetryPolicy,
    /// Append-only JSONL of finished records, reused on the next run.
    pub cache: Option<PathBuf>,
}

impl BatchOptions {
    pub fn new(template: PromptTemplate, max_grade: Grade) -> Self {
        Self {
            template,
            decoding: DecodingConfig::default(),
            grade_tokens: GradeTokens::digits(max_grade),
            max_grade,
            fallback: Fallback::Uniform,
            workers: 4,
            retry: RetryPolicy::default(),
            cache: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchFailure {
    pub topic: String,
    pub doc: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct BatchReport {
    /// In input order, one per pair that produced a record.
    pub records: Vec<ProbRecord>,
    pub failures: Vec<BatchFailure>,
    /// Pairs that received the uniform fallback.
    pub fallbacks: Vec<PairKey>,
    /// Pairs served from the cache.
    pub cached: usize,
}

type CacheMap = HashMap<(String, String), ProbRecord>;

/// Cached records plus, when the last line is torn, the length to truncate to.
fn load_cache(options: &BatchOptions, model_id: &str) -> Result<(CacheMap, Option<u64>), LlmError> {
    let Some(path) = &options.cache else {
        return Ok((HashMap::new(), None));
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((HashMap::new(), None)),
        Err(e) => return Err(e.into()),
    };
    let torn = !text.is_empty() && !text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut map = HashMap::new();
    for (i, line) in lines.iter().enumerate() {
        match read_probs(line.as_bytes(), options.max_grade) {
            Ok(recs) => {
                for r in recs {
                    if r.prompt_id == options.template.id && r.model_id == model_id {
                        map.insert((r.topic_id.clone(), r.doc_id.clone()), r);
                    }
                }
            }
            // A half-written final line from an interrupted run.
            Err(_) if torn && i + 1 == lines.len() => {}
            Err(e) => return Err(LlmError::Cache(format!("{}: line {}: {e}", path.display(), i + 1))),
        }
    }
    let keep = torn.then(|| text.rfind('\n').map_or(0, |i| i + 1) as u64);
    Ok((map, keep))
}

enum Outcome {
    Record(ProbRecord),
    Fallback(ProbRecord),
    Failed(String),
}

fn annotate_one<C: CompletionClient + ?Sized>(
    client: &C,
    texts: &Texts,
    options: &BatchOptions,
    model_id: &str,
    key: &PairKey,
) -> Outcome {
    let Some(topic) = texts.topics.get(&key.topic) else {
        return Outcome::Failed(format!("no text for topic {}", key.topic));
    };
    let Some(doc) = texts.docs.get(&key.doc) else {
        return Outcome::Failed(format!("no text for document {}", key.doc));
    };
    let prompt = match options.template.render(&topic.title, &topic.description, doc, options.max_grade) {
        Ok(p) => p,
        Err(e) => return Outcome::Failed(e.to_string()),
    };
    let record = |raw: BTreeMap<Grade, f64>| {
        ProbRecord::new(&key.topic, &key.doc, raw, options.max_grade, &options.template.id, model_id)
    };
    match fetch_grade_probs(
        client,
        &options.decoding,
        &prompt,
        &options.grade_tokens,
        options.template.answer_marker.as_deref(),
        &options.retry,
    ) {
        Ok(raw) => match record(raw) {
            Ok(r) => Outcome::Record(r),
            Err(e) => Outcome::Failed(e.to_string()),
        },
        Err(LlmError::NoGradeTokenFound) if options.fallback == Fallback::Uniform => {
            let raw = (0..=options.max_grade).map(|g| (g, 1.0)).collect();
            match record(raw) {
                Ok(r) => Outcome::Fallback(r),
                Err(e) => Outcome::Failed(e.to_string()),
            }
        }
        Err(e) => Outcome::Failed(e.to_string()),
    }
}

/// Annotates every pair, reusing cached records and appending new ones as
/// they finish. Per-pair errors land in the failure list.
pub fn batch_annotate<C: CompletionClient + ?Sized>(
    pairs: &[PairKey],
    texts: &Texts,
    client: &C,
    options: &BatchOptions,
) -> Result<BatchReport, LlmError> {
    options.decoding.validate(options.max_grade)?;
    options.template.check()?;
    let model_id = client.model_id().to_string();
    let (cache, torn) = load_cache(options, &model_id)?;

    let mut sink = match &options.cache {
        Some(path) => {
            if let Some(len) = torn {
                OpenOptions::new().write(true).open(path)?.set_len(len)?;
            }
            Some(OpenOptions::new().create(true).append(true).open(path)?)
        }
        None => None,
    };

    let mut todo: Vec<&PairKey> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for k in pairs {
        if !cache.contains_key(&(k.topic.clone(), k.doc.clone())) && seen.insert(k) {
            todo.push(k);
        }
    }

    let sink_lock = Mutex::new((&mut sink, None::<std::io::Error>));
    let results: Mutex<HashMap<&PairKey, Outcome>> = Mutex::new(HashMap::new());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..options.workers.max(1).min(todo.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&key) = todo.get(i) else { break };
                let out = annotate_one(client, texts, options, &model_id, key);
                if let Outcome::Record(r) | Outcome::Fallback(r) = &out {
                    let mut guard = sink_lock.lock().unwrap();
                    let (sink, err) = &mut *guard;
                    if let (Some(f), None) = (sink.as_mut(), err.as_ref()) {
                        let mut line = Vec::new();
                        let res = write_prob_record(r, &mut line)
                            .map_err(std::io::Error::other)
                            .and_then(|_| f.write_all(&line))
                            .and_then(|_| f.flush());
                        if let Err(e) = res {
                            *err = Some(e);
                        }
                    }
                }
                results.lock().unwrap().insert(key, out);
            });
        }
    });
    if let (_, Some(e)) = sink_lock.into_inner().unwrap() {
        return Err(LlmError::Cache(e.to_string()));
    }

    let results = results.into_inner().unwrap();
    let mut report = BatchReport::default();
    for k in pairs {
        if let Some(r) = cache.get(&(k.topic.clone(), k.doc.clone())) {
            report.cached += 1;
            report.records.push(r.clone());
            continue;
        }
        match &results[k] {
            Outcome::Record(r) => report.records.push(r.clone()),
            Outcome::Fallback(r) => {
                report.fallbacks.push(k.clone());
                report.records.push(r.clone());
            }
            Outcome::Failed(e) => report.failures.push(BatchFailure {
                topic: k.topic.clone(),
                doc: k.doc.clone(),
                error: e.clone(),
            }),
        }
    }
    Ok(report)
}
