use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{numbered_lines, CountingWriter, PairKey, TrecError};
use crate::grades::Grade;
use crate::strategies::FinalLabels;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QrelsRecord {
    pub topic_id: String,
    pub doc_id: String,
    pub grade: Grade,
}

/// Parses `topic iteration doc grade` lines. The iteration field is dropped.
pub fn parse_qrels<R: BufRead>(reader: R) -> Result<Vec<QrelsRecord>, TrecError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in numbered_lines(reader) {
        let (no, line) = line?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(TrecError::MalformedLine(no));
        }
        let grade: i64 = fields[3].parse().map_err(|_| TrecError::MalformedLine(no))?;
        if grade < 0 {
            return Err(TrecError::NegativeGrade { line: no, grade });
        }
        let grade = Grade::try_from(grade).map_err(|_| TrecError::GradeOutOfRange {
            line: no,
            grade,
            max_grade: Grade::MAX,
        })?;
        let (topic, doc) = (fields[0].to_string(), fields[2].to_string());
        if !seen.insert((topic.clone(), doc.clone())) {
            return Err(TrecError::DuplicatePair {
                line: no,
                topic,
                doc,
            });
        }
        out.push(QrelsRecord {
            topic_id: topic,
            doc_id: doc,
            grade,
        });
    }
    Ok(out)
}

/// Rejects any record whose grade exceeds `max_grade`. Line numbers are
/// positions in `records`, counted from 1.
pub fn check_grade_range(records: &[QrelsRecord], max_grade: Grade) -> Result<(), TrecError> {
    match records.iter().position(|r| r.grade > max_grade) {
        Some(i) => Err(TrecError::GradeOutOfRange {
            line: i + 1,
            grade: records[i].grade as i64,
            max_grade,
        }),
        None => Ok(()),
    }
}

/// Writes records as qrels lines sorted by `(topic, doc)`. Returns bytes written.
pub fn write_qrels_records<W: Write>(
    records: &[QrelsRecord],
    sink: W,
) -> Result<usize, TrecError> {
    let mut sorted: Vec<&QrelsRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.topic_id, &a.doc_id).cmp(&(&b.topic_id, &b.doc_id)));
    let mut w = CountingWriter::new(sink);
    for r in sorted {
        writeln!(w, "{} 0 {} {}", r.topic_id, r.doc_id, r.grade)?;
    }
    w.flush()?;
    Ok(w.count)
}

/// Exports a finished label set: human grades where judged, predictions elsewhere.
///
/// `pairs` is indexed by `PairId`. Fails if any pair carries no label.
pub fn write_qrels<W: Write>(
    pairs: &[PairKey],
    labels: &FinalLabels,
    sink: W,
) -> Result<usize, TrecError> {
    let mut records = Vec::with_capacity(pairs.len());
    for (i, key) in pairs.iter().enumerate() {
        let grade = labels
            .grade(crate::collection::PairId(i))
            .ok_or_else(|| TrecError::IncompleteLabels {
                topic: key.topic.clone(),
                doc: key.doc.clone(),
            })?;
        records.push(QrelsRecord {
            topic_id: key.topic.clone(),
            doc_id: key.doc.clone(),
            grade,
        });
    }
    write_qrels_records(&records, sink)
}
