use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{numbered_lines, CountingWriter, TrecError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub topic_id: String,
    pub doc_id: String,
    pub rank: u32,
    pub score: f64,
    pub system_tag: String,
}

/// Parses `topic Q0 doc rank score tag` lines.
///
/// The rank column is ignored: ranks are recomputed per `(tag, topic)` from
/// descending score, ties broken by ascending doc id. Output is ordered by
/// `(tag, topic, rank)`.
pub fn parse_run<R: BufRead>(reader: R) -> Result<Vec<RunRecord>, TrecError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in numbered_lines(reader) {
        let (no, line) = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(TrecError::MalformedLine(no));
        }
        let rank: u32 = f[3].parse().map_err(|_| TrecError::MalformedLine(no))?;
        let score: f64 = f[4].parse().map_err(|_| TrecError::MalformedLine(no))?;
        if !score.is_finite() {
            return Err(TrecError::MalformedLine(no));
        }
        let rec = RunRecord {
            topic_id: f[0].to_string(),
            doc_id: f[2].to_string(),
            rank,
            score,
            system_tag: f[5].to_string(),
        };
        if !seen.insert((rec.system_tag.clone(), rec.topic_id.clone(), rec.doc_id.clone())) {
            return Err(TrecError::DuplicateDoc {
                line: no,
                system: rec.system_tag,
                topic: rec.topic_id,
                doc: rec.doc_id,
            });
        }
        out.push(rec);
    }
    normalize_ranks(&mut out);
    Ok(out)
}

/// Reassigns ranks `1..=m` within each `(tag, topic)` and sorts the records.
/// Idempotent.
pub fn normalize_ranks(records: &mut Vec<RunRecord>) {
    let mut groups: BTreeMap<(String, String), Vec<RunRecord>> = BTreeMap::new();
    for r in records.drain(..) {
        groups
            .entry((r.system_tag.clone(), r.topic_id.clone()))
            .or_default()
            .push(r);
    }
    for (_, mut group) in groups {
        group.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        for (i, mut r) in group.into_iter().enumerate() {
            r.rank = i as u32 + 1;
            records.push(r);
        }
    }
}

/// Writes records in standard six-column form. Returns bytes written.
pub fn write_run<W: Write>(records: &[RunRecord], sink: W) -> Result<usize, TrecError> {
    let mut w = CountingWriter::new(sink);
    for r in records {
        writeln!(
            w,
            "{} Q0 {} {} {} {}",
            r.topic_id, r.doc_id, r.rank, r.score, r.system_tag
        )?;
    }
    w.flush()?;
    Ok(w.count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_fields() {
        let recs = parse_run("401 Q0 D7 1 12.5 sysA\n".as_bytes()).unwrap();
        assert_eq!(
            recs,
            vec![RunRecord {
                topic_id: "401".into(),
                doc_id: "D7".into(),
                rank: 1,
                score: 12.5,
                system_tag: "sysA".into()
            }]
        );
    }

    #[test]
    fn equal_scores_break_by_doc_id() {
        let recs = parse_run("1 Q0 Z 1 3.0 s\n1 Q0 A 2 3.0 s\n".as_bytes()).unwrap();
        assert_eq!(recs[0].doc_id, "A");
        assert_eq!(recs[0].rank, 1);
        assert_eq!(recs[1].doc_id, "Z");
        assert_eq!(recs[1].rank, 2);
    }

    #[test]
    fn ranks_follow_scores() {
        // Given ranks 3 and 1 with scores 1.0 and 2.0: score wins.
        let recs = parse_run("1 Q0 X 3 1.0 s\n1 Q0 Y 1 2.0 s\n".as_bytes()).unwrap();
        let x = recs.iter().find(|r| r.doc_id == "X").unwrap();
        let y = recs.iter().find(|r| r.doc_id == "Y").unwrap();
        assert_eq!(x.rank, 2);
        assert_eq!(y.rank, 1);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_run("1 Q0 X 3 1.0\n".as_bytes()),
            Err(TrecError::MalformedLine(1))
        ));
        assert!(matches!(
            parse_run("1 Q0 X 1 1.0 s\n1 Q0 X 2 0.5 s\n".as_bytes()),
            Err(TrecError::DuplicateDoc { line: 2, .. })
        ));
        // Same doc under a different system is fine.
        assert!(parse_run("1 Q0 X 1 1.0 s\n1 Q0 X 1 0.5 t\n".as_bytes()).is_ok());
    }

    fn run_records() -> impl Strategy<Value = Vec<RunRecord>> {
        proptest::collection::btree_map(
            ("[a-c]", "[0-9]{1,2}", "[a-z]{1,3}"),
            -100i32..100,
            0..30,
        )
        .prop_map(|m| {
            m.into_iter()
                .map(|((sys, topic, doc), s)| RunRecord {
                    topic_id: topic,
                    doc_id: doc,
                    rank: 1,
                    score: s as f64 / 8.0,
                    system_tag: sys,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn normalization_idempotent_and_roundtrips(mut recs in run_records()) {
            normalize_ranks(&mut recs);
            let once = recs.clone();
            normalize_ranks(&mut recs);
            prop_assert_eq!(&recs, &once);

            let mut buf = Vec::new();
            write_run(&recs, &mut buf).unwrap();
            let parsed = parse_run(buf.as_slice()).unwrap();
            prop_assert_eq!(parsed, once);
        }
    }
}
