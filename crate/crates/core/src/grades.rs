//! Relevance grades and normalized LLM grade vectors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// An ordinal relevance grade in `0..=l`.
pub type Grade = u8;

/// Tolerance used when checking that a vector sums to one.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradeError {
    #[error("raw grade probabilities have zero total mass")]
    ZeroMass,
    #[error("grade {grade} exceeds the declared maximum grade {max_grade}")]
    UnknownGrade { grade: u32, max_grade: Grade },
    #[error("grade probability for grade {0} is negative or not finite")]
    InvalidMass(Grade),
    #[error("grade vector has {got} entries, expected {expected}")]
    WrongLength { got: usize, expected: usize },
    #[error("grade vector does not sum to 1 (sum = {0})")]
    NotNormalized(f64),
}

/// Normalized probability vector over grades `0..=l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct GradeVector(Vec<f64>);

impl GradeVector {
    /// Validates that `probs` is a distribution (nonnegative, sums to one).
    pub fn new(probs: Vec<f64>) -> Result<Self, GradeError> {
        if probs.len() < 2 {
            return Err(GradeError::WrongLength {
                got: probs.len(),
                expected: 2,
            });
        }
        for (g, &p) in probs.iter().enumerate() {
            if !(p.is_finite() && p >= 0.0) {
                return Err(GradeError::InvalidMass(g as Grade));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(GradeError::NotNormalized(sum));
        }
        Ok(Self(probs))
    }

    /// Builds a vector from values already known to form a distribution.
    pub(crate) fn from_normalized(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        Self(probs)
    }

    /// The maximally uncertain vector over `0..=max_grade`.
    pub fn uniform(max_grade: Grade) -> Self {
        let k = max_grade as usize + 1;
        Self(vec![1.0 / k as f64; k])
    }

    /// Binary vector `[1 - p, p]`.
    pub fn binary(p_relevant: f64) -> Result<Self, GradeError> {
        Self::new(vec![1.0 - p_relevant, p_relevant])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn max_grade(&self) -> Grade {
        (self.0.len() - 1) as Grade
    }

    pub fn get(&self, grade: Grade) -> f64 {
        self.0[grade as usize]
    }

    /// Most likely grade; ties go to the lower grade.
    pub fn argmax(&self) -> Grade {
        argmax_lowest(&self.0) as Grade
    }
}

impl TryFrom<Vec<f64>> for GradeVector {
    type Error = GradeError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<GradeVector> for Vec<f64> {
    fn from(value: GradeVector) -> Self {
        value.0
    }
}

/// Index of the largest value, preferring the lowest index on ties.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Top grade, runner-up grade and their probability gap.
///
/// Ties go to the lower index for both the top and the runner-up.
pub fn top_two(values: &[f64]) -> (usize, usize, f64) {
    let k = argmax_lowest(values);
    let mut s = usize::MAX;
    for (i, &v) in values.iter().enumerate() {
        if i == k {
            continue;
        }
        if s == usize::MAX || v > values[s] {
            s = i;
        }
    }
    (k, s, values[k] - values[s])
}

/// Normalizes raw per-grade LLM probabilities: `pi[k] = raw[k] / sum_j raw[j]`.
///
/// Grades absent from `raw` get zero mass.
pub fn normalize_probabilities(
    raw: &BTreeMap<Grade, f64>,
    max_grade: Grade,
) -> Result<GradeVector, GradeError> {
    let mut probs = vec![0.0; max_grade as usize + 1];
    for (&grade, &mass) in raw {
        if grade > max_grade {
            return Err(GradeError::UnknownGrade {
                grade: grade as u32,
                max_grade,
            });
        }
        if !(mass.is_finite() && mass >= 0.0) {
            return Err(GradeError::InvalidMass(grade));
        }
        probs[grade as usize] = mass;
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(GradeError::ZeroMass);
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(GradeVector(probs))
}

/// `1 iff grade > l/2`.
pub fn binarize(grade: Grade, max_grade: Grade) -> u8 {
    // 2y > l avoids the half-integer threshold.
    u8::from(2 * grade as u32 > max_grade as u32)
}

/// Smallest grade strictly above `l/2`.
pub fn lowest_relevant_grade(max_grade: Grade) -> Grade {
    (max_grade / 2) + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(entries: &[(Grade, f64)]) -> BTreeMap<Grade, f64> {
        entries.iter().copied().collect()
    }

    #[test]
    fn normalize_symmetric() {
        let pi = normalize_probabilities(&raw(&[(0, 0.2), (1, 0.2)]), 1).unwrap();
        assert_eq!(pi.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn normalize_hand_values() {
        let pi = normalize_probabilities(&raw(&[(0, 0.3), (1, 0.1)]), 1).unwrap();
        assert!((pi.get(0) - 0.75).abs() < 1e-12);
        assert!((pi.get(1) - 0.25).abs() < 1e-12);

        let pi = normalize_probabilities(&raw(&[(0, 0.2), (2, 0.6)]), 2).unwrap();
        assert!((pi.get(0) - 0.25).abs() < 1e-12);
        assert_eq!(pi.get(1), 0.0);
        assert!((pi.get(2) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn normalize_errors() {
        assert_eq!(
            normalize_probabilities(&raw(&[(0, 0.0), (1, 0.0)]), 1),
            Err(GradeError::ZeroMass)
        );
        assert!(matches!(
            normalize_probabilities(&raw(&[(3, 0.5)]), 2),
            Err(GradeError::UnknownGrade { grade: 3, .. })
        ));
    }

    #[test]
    fn binarize_threshold() {
        assert_eq!(binarize(1, 1), 1);
        assert_eq!(binarize(0, 1), 0);
        assert_eq!(binarize(1, 2), 0);
        assert_eq!(binarize(2, 2), 1);
        assert_eq!(binarize(2, 3), 1);
        assert_eq!(lowest_relevant_grade(1), 1);
        assert_eq!(lowest_relevant_grade(2), 2);
        assert_eq!(lowest_relevant_grade(3), 2);
    }

    #[test]
    fn top_two_tie_rules() {
        assert_eq!(top_two(&[0.5, 0.5]), (0, 1, 0.0));
        let (k, s, m) = top_two(&[0.2, 0.3, 0.5]);
        assert_eq!((k, s), (2, 1));
        assert!((m - 0.2).abs() < 1e-12);
        assert_eq!(top_two(&[0.1, 0.45, 0.45]).0, 1);
        assert_eq!(top_two(&[0.1, 0.45, 0.45]).1, 2);
    }

    proptest! {
        #[test]
        fn normalized_sums_to_one_and_keeps_argmax(
            masses in proptest::collection::vec(0.0f64..10.0, 2..5)
        ) {
            prop_assume!(masses.iter().sum::<f64>() > 1e-6);
            let max_grade = (masses.len() - 1) as Grade;
            let map: BTreeMap<Grade, f64> =
                masses.iter().enumerate().map(|(g, &m)| (g as Grade, m)).collect();
            let pi = normalize_probabilities(&map, max_grade).unwrap();
            prop_assert!((pi.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(pi.argmax() as usize, argmax_lowest(&masses));
        }
    }
}
