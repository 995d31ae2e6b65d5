use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{numbered_lines, CountingWriter, TrecError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> Result<Vec<T>, TrecError> {
    let mut out = Vec::new();
    for line in numbered_lines(reader) {
        let (no, line) = line?;
        out.push(serde_json::from_str(&line).map_err(|_| TrecError::MalformedLine(no))?);
    }
    Ok(out)
}

fn write_jsonl<W: Write, T: Serialize>(items: &[T], sink: W) -> Result<usize, TrecError> {
    let mut w = CountingWriter::new(sink);
    for item in items {
        let json = serde_json::to_string(item).map_err(std::io::Error::other)?;
        writeln!(w, "{json}")?;
    }
    w.flush()?;
    Ok(w.count)
}

/// One `{"id", "title", "description"}` object per line.
pub fn read_topics<R: BufRead>(reader: R) -> Result<Vec<Topic>, TrecError> {
    read_jsonl(reader)
}

/// One `{"id", "text"}` object per line.
pub fn read_documents<R: BufRead>(reader: R) -> Result<Vec<Document>, TrecError> {
    read_jsonl(reader)
}

pub fn write_topics<W: Write>(topics: &[Topic], sink: W) -> Result<usize, TrecError> {
    write_jsonl(topics, sink)
}

pub fn write_documents<W: Write>(docs: &[Document], sink: W) -> Result<usize, TrecError> {
    write_jsonl(docs, sink)
}
