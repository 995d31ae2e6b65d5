use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{PairKey, TrecError};
use crate::grades::Grade;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentLogEntry {
    pub session_id: String,
    pub seq: u64,
    pub topic_id: String,
    pub doc_id: String,
    pub grade: Grade,
    pub assessor_id: String,
    pub timestamp: DateTime<Utc>,
}

/// Reads a judgment log, validating sequence order and pair uniqueness per
/// session.
///
/// A final line without a trailing newline that fails to parse is treated as
/// a torn write and dropped.
pub fn read_judgment_log<R: Read>(reader: R) -> Result<Vec<JudgmentLogEntry>, TrecError> {
    let mut reader = BufReader::new(reader);
    let mut entries = Vec::new();
    let mut last_seq: HashMap<String, u64> = HashMap::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut buf = String::new();
    let mut line_no = 0;
    loop {
        buf.clear();
        if reader.read_line(&mut buf)? == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        let text = buf.trim();
        if text.is_empty() {
            continue;
        }
        let entry: JudgmentLogEntry = match serde_json::from_str(text) {
            Ok(e) => e,
            Err(_) if !complete => break,
            Err(e) => {
                return Err(TrecError::CorruptLog {
                    line: line_no,
                    reason: e.to_string(),
                })
            }
        };
        if let Some(&prev) = last_seq.get(&entry.session_id) {
            if entry.seq <= prev {
                return Err(TrecError::CorruptLog {
                    line: line_no,
                    reason: format!("seq {} does not follow {}", entry.seq, prev),
                });
            }
        }
        if !seen.insert((
            entry.session_id.clone(),
            entry.topic_id.clone(),
            entry.doc_id.clone(),
        )) {
            return Err(TrecError::CorruptLog {
                line: line_no,
                reason: format!("pair ({}, {}) judged twice", entry.topic_id, entry.doc_id),
            });
        }
        last_seq.insert(entry.session_id.clone(), entry.seq);
        entries.push(entry);
    }
    Ok(entries)
}

/// The annotated set reconstructed from log entries.
pub fn annotated_set(entries: &[JudgmentLogEntry]) -> BTreeMap<PairKey, Grade> {
    entries
        .iter()
        .map(|e| (PairKey::new(&e.topic_id, &e.doc_id), e.grade))
        .collect()
}

/// Append-only, single-writer judgment log for one session. Each append is
/// flushed and synced before returning.
#[derive(Debug)]
pub struct JudgmentLog {
    path: PathBuf,
    session_id: String,
    file: File,
    next_seq: u64,
    entries: Vec<JudgmentLogEntry>,
}

impl JudgmentLog {
    /// Opens (or creates) the log, loading any previous entries.
    pub fn open(path: impl AsRef<Path>, session_id: impl Into<String>) -> Result<Self, TrecError> {
        let path = path.as_ref().to_path_buf();
        let session_id = session_id.into();
        let mut entries = match File::open(&path) {
            Ok(f) => read_judgment_log(f)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        entries.retain(|e| e.session_id == session_id);
        // Rewrite without a torn tail so appends start on a clean line.
        let valid_len = Self::clean_length(&path)?;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if let Some(len) = valid_len {
            file.set_len(len)?;
        }
        let next_seq = entries.last().map_or(1, |e| e.seq + 1);
        Ok(Self {
            path,
            session_id,
            file,
            next_seq,
            entries,
        })
    }

    fn clean_length(path: &Path) -> Result<Option<u64>, TrecError> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if bytes.is_empty() || bytes.ends_with(b"\n") {
            return Ok(None);
        }
        let cut = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        Ok(Some(cut as u64))
    }

    pub fn append(
        &mut self,
        key: &PairKey,
        grade: Grade,
        assessor_id: &str,
        timestamp: DateTime<Utc>,
    ) -> Result<JudgmentLogEntry, TrecError> {
        let entry = JudgmentLogEntry {
            session_id: self.session_id.clone(),
            seq: self.next_seq,
            topic_id: key.topic.clone(),
            doc_id: key.doc.clone(),
            grade,
            assessor_id: assessor_id.to_string(),
            timestamp,
        };
        let mut line = serde_json::to_string(&entry).map_err(std::io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        self.file.sync_data()?;
        self.next_seq += 1;
        self.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn entries(&self) -> &[JudgmentLogEntry] {
        &self.entries
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
