//! On-disk artifacts: TREC qrels and runs, LLM probability records, topic and
//! document text stores, collection manifests and append-only judgment logs.
//!
//! Parsers are pure functions over a `BufRead` and can run concurrently on
//! distinct streams.

mod log;
mod manifest;
mod probs;
mod qrels;
mod runs;
mod texts;

use std::io;

use thiserror::Error;

use crate::grades::{Grade, GradeError};

pub use log::{annotated_set, read_judgment_log, JudgmentLog, JudgmentLogEntry};
pub use manifest::Manifest;
pub use probs::{read_probs, write_prob_record, write_probs, ProbRecord};
pub use qrels::{check_grade_range, parse_qrels, write_qrels, write_qrels_records, QrelsRecord};
pub use runs::{normalize_ranks, parse_run, write_run, RunRecord};
pub use texts::{read_documents, read_topics, write_documents, write_topics, Document, Topic};

#[derive(Debug, Error)]
pub enum TrecError {
    #[error("line {0}: malformed line")]
    MalformedLine(usize),
    #[error("line {line}: negative grade {grade}")]
    NegativeGrade { line: usize, grade: i64 },
    #[error("line {line}: grade {grade} outside declared range 0..={max_grade}")]
    GradeOutOfRange {
        line: usize,
        grade: i64,
        max_grade: Grade,
    },
    #[error("line {line}: duplicate pair ({topic}, {doc})")]
    DuplicatePair {
        line: usize,
        topic: String,
        doc: String,
    },
    #[error("line {line}: document {doc} appears twice for ({system}, {topic})")]
    DuplicateDoc {
        line: usize,
        system: String,
        topic: String,
        doc: String,
    },
    #[error("line {line}: {source}")]
    Grade {
        line: usize,
        #[source]
        source: GradeError,
    },
    #[error("pair ({topic}, {doc}) has neither a human nor a predicted label")]
    IncompleteLabels { topic: String, doc: String },
    #[error("judgment log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl TrecError {
    pub(crate) fn grade(line: usize, source: GradeError) -> Self {
        TrecError::Grade { line, source }
    }
}

/// Topic-document identity as it appears on disk.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct PairKey {
    pub topic: String,
    pub doc: String,
}

impl PairKey {
    pub fn new(topic: impl Into<String>, doc: impl Into<String>) -> Self {
        Self {
            topic: topic.into(),
            doc: doc.into(),
        }
    }
}

/// Iterates over lines with 1-based numbers, skipping blank lines.
pub(crate) fn numbered_lines<R: io::BufRead>(
    reader: R,
) -> impl Iterator<Item = io::Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, line)| line.map(|l| (i + 1, l)))
        .filter(|res| match res {
            Ok((_, l)) => !l.trim().is_empty(),
            Err(_) => true,
        })
}

/// Counts bytes written through a sink.
pub(crate) struct CountingWriter<W> {
    inner: W,
    pub(crate) count: usize,
}

impl<W: io::Write> CountingWriter<W> {
    pub(crate) fn new(inner: W) -> Self {
        Self { inner, count: 0 }
    }
}

impl<W: io::Write> io::Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}
