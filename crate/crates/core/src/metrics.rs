//! System effectiveness (AP, NDCG) and agreement between system rankings
//! (Kendall's tau-b, maximum drop) plus the label overlap score.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collection::Collection;
use crate::grades::{binarize, Grade};

pub const DEFAULT_NDCG_CUTOFF: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("score maps have different keys")]
    KeyMismatch,
    #[error("at least two systems are needed, got {0}")]
    TooFewSystems(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Map,
    Ndcg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub system_tag: String,
    pub per_topic: BTreeMap<String, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingComparison {
    pub tau: f64,
    pub max_drop: usize,
    pub paired_systems: usize,
}

/// AP of a ranking against binary judgments. Unjudged documents count as
/// non-relevant; returns 0 when the topic has no relevant documents.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], qrels: &HashMap<String, Grade>) -> f64 {
    let r = qrels.values().filter(|&&g| g > 0).count();
    ap_from_flags(ranked.iter().map(|d| qrels.get(d.as_ref()).is_some_and(|&g| g > 0)), r)
}

fn ap_from_flags(flags: impl Iterator<Item = bool>, r: usize) -> f64 {
    if r == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, rel) in flags.enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r as f64
}

/// NDCG@cutoff with linear gain and a `log2(r + 1)` discount.
pub fn ndcg<S: AsRef<str>>(ranked: &[S], qrels: &HashMap<String, Grade>, cutoff: usize) -> f64 {
    let gains = ranked.iter().map(|d| qrels.get(d.as_ref()).copied().unwrap_or(0));
    ndcg_from_gains(gains, qrels.values().copied().collect(), cutoff)
}

fn ndcg_from_gains(ranked: impl Iterator<Item = Grade>, mut ideal: Vec<Grade>, cutoff: usize) -> f64 {
    let discount = |i: usize| ((i + 2) as f64).log2();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(cutoff)
        .enumerate()
        .map(|(i, &g)| f64::from(g) / discount(i))
        .sum();
    if idcg == 0.0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .take(cutoff)
        .enumerate()
        .map(|(i, g)| f64::from(g) / discount(i))
        .sum();
    dcg / idcg
}

/// Kendall's tau-b over paired observations, O(n log n).
///
/// When either side is constant the coefficient is undefined; this returns
/// 1.0 if both sides are constant and 0.0 otherwise.
pub fn tau_b(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(b[i].total_cmp(&b[j])));

    let n0 = (n * n.saturating_sub(1) / 2) as i64;
    let (mut n1, mut n3) = (0i64, 0i64);
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && a[idx[j]] == a[idx[i]] {
            j += 1;
        }
        let t = (j - i) as i64;
        n1 += t * (t - 1) / 2;
        let mut k = i;
        while k < j {
            let mut m = k + 1;
            while m < j && b[idx[m]] == b[idx[k]] {
                m += 1;
            }
            let u = (m - k) as i64;
            n3 += u * (u - 1) / 2;
            k = m;
        }
        i = j;
    }

    let mut vals: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
    let swaps = merge_count(&mut vals) as i64;

    let mut n2 = 0i64;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && vals[j] == vals[i] {
            j += 1;
        }
        let u = (j - i) as i64;
        n2 += u * (u - 1) / 2;
        i = j;
    }

    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if denom == 0.0 {
        return if n1 == n0 && n2 == n0 { 1.0 } else { 0.0 };
    }
    let num = n0 - n1 - n2 + n3 - 2 * swaps;
    num as f64 / denom
}

/// Sorts ascending and returns the number of strictly inverted pairs.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j].total_cmp(&v[i]) == Ordering::Less {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

fn paired<'a>(
    a: &'a BTreeMap<String, f64>,
    b: &'a BTreeMap<String, f64>,
) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    if a.len() != b.len() || !a.keys().eq(b.keys()) {
        return Err(MetricError::KeyMismatch);
    }
    Ok((a.values().copied().collect(), b.values().copied().collect()))
}

pub fn kendall_tau_b(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> Result<f64, MetricError> {
    let (x, y) = paired(a, b)?;
    if x.len() < 2 {
        return Err(MetricError::TooFewSystems(x.len()));
    }
    Ok(tau_b(&x, &y))
}

/// 1-based ranks by descending score, ties by tag ascending.
pub fn rank_systems(scores: &BTreeMap<String, f64>) -> BTreeMap<String, usize> {
    let mut order: Vec<(&String, f64)> = scores.iter().map(|(k, &v)| (k, v)).collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(y.0)));
    order
        .into_iter()
        .enumerate()
        .map(|(i, (k, _))| (k.clone(), i + 1))
        .collect()
}

/// Largest rank decrease of any system going from `truth` to `eval`.
pub fn max_drop(truth: &BTreeMap<String, f64>, eval: &BTreeMap<String, f64>) -> Result<usize, MetricError> {
    paired(truth, eval)?;
    let rt = rank_systems(truth);
    let re = rank_systems(eval);
    Ok(rt
        .iter()
        .map(|(k, &r)| re[k].saturating_sub(r))
        .max()
        .unwrap_or(0))
}

/// TP / (TP + disagreements), TP being pairs where both agree on a relevant
/// grade. 1.0 when both counts are zero.
pub fn overlap<K: Ord>(truth: &BTreeMap<K, Grade>, predicted: &BTreeMap<K, Grade>) -> Result<f64, MetricError> {
    if truth.len() != predicted.len() || !truth.keys().eq(predicted.keys()) {
        return Err(MetricError::KeyMismatch);
    }
    Ok(overlap_of(truth.values().copied().zip(predicted.values().copied())))
}

pub fn overlap_of(pairs: impl Iterator<Item = (Grade, Grade)>) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    for (y, p) in pairs {
        if y != p {
            fp += 1;
        } else if y >= 1 {
            tp += 1;
        }
    }
    if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// Scores every system of a collection under `labels` (indexed by pair id).
/// Topics without relevant labels are left out of each mean.
pub fn score_systems(collection: &Collection, labels: &[Grade], metric: Metric, cutoff: usize) -> Vec<SystemScore> {
    let l = collection.max_grade;
    let topics = collection.topic_ids();
    let mut relevant = vec![0usize; topics.len()];
    let mut ideal: Vec<Vec<Grade>> = vec![Vec::new(); topics.len()];
    for (t, (r, ideal)) in relevant.iter_mut().zip(&mut ideal).enumerate() {
        for id in collection.topic_pairs(t) {
            let g = labels[id.0];
            *r += usize::from(binarize(g, l));
            ideal.push(g);
        }
    }
    collection
        .systems()
        .iter()
        .map(|sys| {
            let mut per_topic = BTreeMap::new();
            for (t, ranking) in sys.rankings.iter().enumerate() {
                let value = match metric {
                    Metric::Map => {
                        if relevant[t] == 0 {
                            continue;
                        }
                        let flags = ranking
                            .iter()
                            .map(|p| p.is_some_and(|id| binarize(labels[id.0], l) == 1));
                        ap_from_flags(flags, relevant[t])
                    }
                    Metric::Ndcg => {
                        if ideal[t].iter().all(|&g| g == 0) {
                            continue;
                        }
                        let gains = ranking.iter().map(|p| p.map_or(0, |id| labels[id.0]));
                        ndcg_from_gains(gains, ideal[t].clone(), cutoff)
                    }
                };
                per_topic.insert(topics[t].clone(), value);
            }
            let mean = if per_topic.is_empty() {
                0.0
            } else {
                per_topic.values().sum::<f64>() / per_topic.len() as f64
            };
            SystemScore {
                system_tag: sys.tag.clone(),
                per_topic,
                mean,
            }
        })
        .collect()
}

pub fn mean_scores(scores: &[SystemScore]) -> BTreeMap<String, f64> {
    scores.iter().map(|s| (s.system_tag.clone(), s.mean)).collect()
}

pub fn compare_rankings(truth: &[SystemScore], eval: &[SystemScore]) -> Result<RankingComparison, MetricError> {
    let t = mean_scores(truth);
    let e = mean_scores(eval);
    Ok(RankingComparison {
        tau: kendall_tau_b(&t, &e)?,
        max_drop: max_drop(&t, &e)?,
        paired_systems: t.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qrels(items: &[(&str, Grade)]) -> HashMap<String, Grade> {
        items.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    fn scores(items: &[(&str, f64)]) -> BTreeMap<String, f64> {
        items.iter().map(|(d, g)| (d.to_string(), *g)).collect()
    }

    fn brute_tau(a: &[f64], b: &[f64]) -> f64 {
        let (mut c, mut d, mut ta, mut tb) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let x = (a[i] - a[j]).signum() * f64::from(a[i] != a[j]);
                let y = (b[i] - b[j]).signum() * f64::from(b[i] != b[j]);
                match (x == 0.0, y == 0.0) {
                    (true, true) => {}
                    (true, false) => ta += 1.0,
                    (false, true) => tb += 1.0,
                    (false, false) if x == y => c += 1.0,
                    _ => d += 1.0,
                }
            }
        }
        let denom: f64 = (c + d + ta) * (c + d + tb);
        if denom == 0.0 {
            return if c + d + ta + tb == 0.0 { 1.0 } else { 0.0 };
        }
        (c - d) / denom.sqrt()
    }

    #[test]
    fn ap_examples() {
        let q = qrels(&[("a", 1), ("b", 0), ("c", 1)]);
        assert!((average_precision(&["a", "b", "c"], &q) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&["a", "c", "b"], &q), 1.0);
        assert_eq!(average_precision(&["a"], &qrels(&[("a", 0)])), 0.0);
        // An unretrieved relevant doc still counts in R.
        assert_eq!(average_precision(&["a"], &q), 0.5);
    }

    #[test]
    fn ndcg_examples() {
        let q = qrels(&[("x", 2), ("y", 0), ("z", 1)]);
        let v = ndcg(&["x", "y", "z"], &q, 1000);
        let idcg = 2.0 + 1.0 / 3f64.log2();
        assert!((v - 2.5 / idcg).abs() < 1e-12);
        assert!((v - 0.9502).abs() < 1e-4);
        assert_eq!(ndcg(&["x", "z", "y"], &q, 1000), 1.0);
        assert_eq!(ndcg(&["y"], &qrels(&[("y", 0)]), 1000), 0.0);
    }

    #[test]
    fn tau_examples() {
        let a = scores(&[("A", 1.0), ("B", 2.0), ("C", 3.0), ("D", 4.0)]);
        let b = scores(&[("A", 1.0), ("B", 3.0), ("C", 2.0), ("D", 4.0)]);
        assert!((kendall_tau_b(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(kendall_tau_b(&a, &a).unwrap(), 1.0);
        let r = scores(&[("A", 4.0), ("B", 3.0), ("C", 2.0), ("D", 1.0)]);
        assert_eq!(kendall_tau_b(&a, &r).unwrap(), -1.0);
        assert_eq!(kendall_tau_b(&a, &scores(&[("A", 1.0)])), Err(MetricError::KeyMismatch));
        let one = scores(&[("A", 1.0)]);
        assert_eq!(kendall_tau_b(&one, &one), Err(MetricError::TooFewSystems(1)));
    }

    #[test]
    fn max_drop_examples() {
        let t = scores(&[("A", 3.0), ("B", 2.0), ("C", 1.0)]);
        let e = scores(&[("A", 2.0), ("B", 1.0), ("C", 3.0)]);
        assert_eq!(max_drop(&t, &e).unwrap(), 1);
        assert_eq!(max_drop(&t, &t).unwrap(), 0);
        let t = scores(&[("A", 2.0), ("B", 1.0)]);
        let e = scores(&[("A", 1.0), ("B", 2.0)]);
        assert_eq!(max_drop(&t, &e).unwrap(), 1);
    }

    #[test]
    fn overlap_examples() {
        let y: BTreeMap<usize, Grade> = [1, 0, 1, 0].into_iter().enumerate().collect();
        let p: BTreeMap<usize, Grade> = [1, 1, 1, 0].into_iter().enumerate().collect();
        assert!((overlap(&y, &p).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(overlap(&y, &y).unwrap(), 1.0);
        let q: BTreeMap<usize, Grade> = [0, 1, 0, 1].into_iter().enumerate().collect();
        assert_eq!(overlap(&y, &q).unwrap(), 0.0);
        let z: BTreeMap<usize, Grade> = [0, 0].into_iter().enumerate().collect();
        assert_eq!(overlap(&z, &z).unwrap(), 1.0);
    }

    fn tied_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(f64::from).collect())
    }

    proptest! {
        #[test]
        fn tau_matches_pair_count(pairs in (2usize..50).prop_flat_map(|n| (tied_values(n), tied_values(n)))) {
            let (a, b) = pairs;
            let fast = tau_b(&a, &b);
            prop_assert!((fast - brute_tau(&a, &b)).abs() < 1e-12);
            prop_assert!((fast - tau_b(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn max_drop_rank_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..20), k in 0.1f64..5.0, c in -3.0f64..3.0) {
            let m: BTreeMap<String, f64> = v.iter().enumerate().map(|(i, &x)| (format!("s{i:02}"), x)).collect();
            let moved: BTreeMap<String, f64> = m.iter().map(|(s, &x)| (s.clone(), k * x + c)).collect();
            prop_assert_eq!(max_drop(&m, &m).unwrap(), 0);
            prop_assert_eq!(max_drop(&m, &moved).unwrap(), 0);
        }

        #[test]
        fn ap_and_ndcg_bounded(grades in prop::collection::vec(0u8..3, 1..30), perm_seed: u64) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let q: HashMap<String, Grade> = grades.iter().enumerate().map(|(i, &g)| (format!("d{i}"), g)).collect();
            let mut docs: Vec<String> = q.keys().cloned().collect();
            docs.sort();
            docs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let bin: HashMap<String, Grade> = q.iter().map(|(k, &g)| (k.clone(), u8::from(g > 0))).collect();
            let ap = average_precision(&docs, &bin);
            let nd = ndcg(&docs, &q, 1000);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&nd));
            // Renaming documents leaves NDCG unchanged.
            let renamed: HashMap<String, Grade> = q.iter().map(|(k, &g)| (format!("x{k}"), g)).collect();
            let docs2: Vec<String> = docs.iter().map(|d| format!("x{d}")).collect();
            prop_assert_eq!(ndcg(&docs2, &renamed, 1000), nd);
        }

        #[test]
        fn overlap_permutation_invariant(pairs in prop::collection::vec((0u8..3, 0u8..3), 0..40), seed: u64) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(overlap_of(pairs.into_iter()), overlap_of(shuffled.into_iter()));
        }
    }
}
