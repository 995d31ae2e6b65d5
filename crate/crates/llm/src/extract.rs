use std::collections::{BTreeMap, HashSet};

use lara_core::Grade;
use serde::{Deserialize, Serialize};

use crate::LlmError;

/// One generated position: the sampled token and the top-k alternatives
/// with their log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPosition {
    pub token: String,
    pub top_logprobs: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Completion {
    pub positions: Vec<TokenPosition>,
}

impl Completion {
    pub fn text(&self) -> String {
        self.positions.iter().map(|p| p.token.as_str()).collect()
    }
}

/// Surface forms counted as each grade. Tokenizers differ on whether a
/// digit carries a leading space or quote, so all listed variants are summed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradeTokens {
    pub variants: BTreeMap<Grade, Vec<String>>,
}

impl GradeTokens {
    /// Bare digit plus leading-space and quoted forms for grades `0..=l`.
    pub fn digits(max_grade: Grade) -> Self {
        let variants = (0..=max_grade)
            .map(|g| {
                let d = g.to_string();
                (g, vec![d.clone(), format!(" {d}"), format!("\"{d}"), format!(" \"{d}"), format!("'{d}")])
            })
            .collect();
        Self { variants }
    }

    pub fn grade_of(&self, surface: &str) -> Option<Grade> {
        self.variants
            .iter()
            .find(|(_, vs)| vs.iter().any(|v| v == surface))
            .map(|(&g, _)| g)
    }
}

/// Index of the position holding the grade: the first position, or the
/// first non-blank position starting after `marker` ends.
pub fn grade_position(completion: &Completion, marker: Option<&str>) -> Option<usize> {
    let Some(marker) = marker else {
        return (!completion.positions.is_empty()).then_some(0);
    };
    let text = completion.text();
    let end = text.find(marker)? + marker.len();
    let mut offset = 0;
    for (i, p) in completion.positions.iter().enumerate() {
        if offset >= end && !p.token.trim().is_empty() {
            return Some(i);
        }
        offset += p.token.len();
    }
    None
}

/// `exp(logprob)` summed per grade over the grade-position candidates.
pub fn extract_grade_probs(
    completion: &Completion,
    tokens: &GradeTokens,
    marker: Option<&str>,
) -> Result<BTreeMap<Grade, f64>, LlmError> {
    let pos = grade_position(completion, marker).ok_or(LlmError::NoGradeTokenFound)?;
    let mut seen = HashSet::new();
    let mut out: BTreeMap<Grade, f64> = BTreeMap::new();
    for (surface, lp) in &completion.positions[pos].top_logprobs {
        if !seen.insert(surface.as_str()) {
            continue;
        }
        if let Some(g) = tokens.grade_of(surface) {
            *out.entry(g).or_default() += lp.exp();
        }
    }
    if out.values().all(|&m| m <= 0.0) {
        return Err(LlmError::NoGradeTokenFound);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(token: &str, top: &[(&str, f64)]) -> TokenPosition {
        TokenPosition {
            token: token.into(),
            top_logprobs: top.iter().map(|&(s, p)| (s.to_string(), p.ln())).collect(),
        }
    }

    #[test]
    fn first_position_exponentiated() {
        let c = Completion {
            positions: vec![pos("0", &[("0", 0.6), ("1", 0.3), ("The", 0.05)])],
        };
        let m = extract_grade_probs(&c, &GradeTokens::digits(1), None).unwrap();
        assert!((m[&0] - 0.6).abs() < 1e-12);
        assert!((m[&1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn variants_are_summed() {
        let c = Completion {
            positions: vec![pos(" 1", &[(" 1", 0.4), ("1", 0.2), (" 0", 0.1), ("\"0", 0.05)])],
        };
        let m = extract_grade_probs(&c, &GradeTokens::digits(1), None).unwrap();
        assert!((m[&1] - 0.6).abs() < 1e-12);
        assert!((m[&0] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn no_grade_token() {
        let c = Completion {
            positions: vec![pos("The", &[("The", 0.5), ("A", 0.2), ("7", 0.1)])],
        };
        assert!(matches!(
            extract_grade_probs(&c, &GradeTokens::digits(2), None),
            Err(LlmError::NoGradeTokenFound)
        ));
        assert!(matches!(
            extract_grade_probs(&Completion::default(), &GradeTokens::digits(2), None),
            Err(LlmError::NoGradeTokenFound)
        ));
    }

    #[test]
    fn answer_marker_position() {
        let c = Completion {
            positions: vec![
                pos("1", &[("1", 0.9)]),
                pos(" looks", &[]),
                pos(" fine", &[]),
                pos(".\n", &[]),
                pos("Answer", &[]),
                pos(":", &[]),
                pos(" ", &[]),
                pos("2", &[("2", 0.7), ("1", 0.2)]),
            ],
        };
        assert_eq!(grade_position(&c, Some("Answer:")), Some(7));
        let m = extract_grade_probs(&c, &GradeTokens::digits(2), Some("Answer:")).unwrap();
        assert!((m[&2] - 0.7).abs() < 1e-12);
        assert!(!m.contains_key(&0));
        assert!(extract_grade_probs(&c, &GradeTokens::digits(2), Some("Verdict:")).is_err());
    }

    #[test]
    fn duplicate_candidates_counted_once() {
        let c = Completion {
            positions: vec![pos("1", &[("1", 0.5), ("1", 0.5)])],
        };
        let m = extract_grade_probs(&c, &GradeTokens::digits(1), None).unwrap();
        assert!((m[&1] - 0.5).abs() < 1e-12);
    }
}
