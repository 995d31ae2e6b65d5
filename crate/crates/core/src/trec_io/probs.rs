use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{numbered_lines, CountingWriter, TrecError};
use crate::grades::{normalize_probabilities, Grade, GradeError, GradeVector};

/// LLM grade probabilities for one pair, raw and normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRecord {
    pub topic_id: String,
    pub doc_id: String,
    pub raw_grade_probs: BTreeMap<Grade, f64>,
    pub pi: GradeVector,
    pub prompt_id: String,
    pub model_id: String,
}

impl ProbRecord {
    pub fn new(
        topic_id: impl Into<String>,
        doc_id: impl Into<String>,
        raw_grade_probs: BTreeMap<Grade, f64>,
        max_grade: Grade,
        prompt_id: impl Into<String>,
        model_id: impl Into<String>,
    ) -> Result<Self, GradeError> {
        let pi = normalize_probabilities(&raw_grade_probs, max_grade)?;
        Ok(Self {
            topic_id: topic_id.into(),
            doc_id: doc_id.into(),
            raw_grade_probs,
            pi,
            prompt_id: prompt_id.into(),
            model_id: model_id.into(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProbLine {
    topic: String,
    doc: String,
    probs: BTreeMap<String, f64>,
    #[serde(default)]
    prompt_id: String,
    #[serde(default)]
    model_id: String,
    /// Written for auditability; recomputed from `probs` on read.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pi: Option<Vec<f64>>,
}

/// Reads one JSON object per line. `pi` is always recomputed from `probs`.
pub fn read_probs<R: BufRead>(reader: R, max_grade: Grade) -> Result<Vec<ProbRecord>, TrecError> {
    let mut out = Vec::new();
    for line in numbered_lines(reader) {
        let (no, line) = line?;
        let parsed: ProbLine =
            serde_json::from_str(&line).map_err(|_| TrecError::MalformedLine(no))?;
        let mut raw = BTreeMap::new();
        for (key, mass) in parsed.probs {
            let grade: u32 = key.trim().parse().map_err(|_| TrecError::MalformedLine(no))?;
            if grade > max_grade as u32 {
                return Err(TrecError::grade(
                    no,
                    GradeError::UnknownGrade { grade, max_grade },
                ));
            }
            *raw.entry(grade as Grade).or_insert(0.0) += mass;
        }
        let rec = ProbRecord::new(
            parsed.topic,
            parsed.doc,
            raw,
            max_grade,
            parsed.prompt_id,
            parsed.model_id,
        )
        .map_err(|e| TrecError::grade(no, e))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes a single record as one JSON line.
pub fn write_prob_record<W: Write>(record: &ProbRecord, mut sink: W) -> Result<(), TrecError> {
    let line = ProbLine {
        topic: record.topic_id.clone(),
        doc: record.doc_id.clone(),
        probs: record
            .raw_grade_probs
            .iter()
            .map(|(g, p)| (g.to_string(), *p))
            .collect(),
        prompt_id: record.prompt_id.clone(),
        model_id: record.model_id.clone(),
        pi: Some(record.pi.probs().to_vec()),
    };
    let json = serde_json::to_string(&line).map_err(std::io::Error::other)?;
    writeln!(sink, "{json}")?;
    Ok(())
}

pub fn write_probs<W: Write>(records: &[ProbRecord], sink: W) -> Result<usize, TrecError> {
    let mut w = CountingWriter::new(sink);
    for r in records {
        write_prob_record(r, &mut w)?;
    }
    w.flush()?;
    Ok(w.count)
}
