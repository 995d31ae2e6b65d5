//! Brute-force reference implementations used to check the engine.
//!
//! Each function follows the textbook definition directly and shares no code
//! with `lara-core`.

use std::collections::HashMap;

/// AP as `(1/R) * sum over relevant ranks k of precision@k`, with precision
/// recounted from scratch at every rank.
pub fn average_precision(ranked: &[&str], grades: &HashMap<&str, u8>) -> f64 {
    let relevant = grades.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let is_rel = |d: &str| grades.get(d).is_some_and(|&g| g > 0);
    let mut total = 0.0;
    for k in 0..ranked.len() {
        if is_rel(ranked[k]) {
            let hits = ranked[..=k].iter().filter(|d| is_rel(d)).count();
            total += hits as f64 / (k + 1) as f64;
        }
    }
    total / relevant as f64
}

fn dcg(gains: &[u8]) -> f64 {
    gains
        .iter()
        .enumerate()
        .map(|(i, &g)| g as f64 / (i as f64 + 2.0).log2())
        .sum()
}

/// NDCG@k with linear gains; the ideal list is every judged grade sorted
/// descending.
pub fn ndcg(ranked: &[&str], grades: &HashMap<&str, u8>, k: usize) -> f64 {
    let got: Vec<u8> = ranked.iter().take(k).map(|d| grades.get(d).copied().unwrap_or(0)).collect();
    let mut ideal: Vec<u8> = grades.values().copied().collect();
    ideal.sort_by(|a, b| b.cmp(a));
    ideal.truncate(k);
    let best = dcg(&ideal);
    if best == 0.0 {
        0.0
    } else {
        dcg(&got) / best
    }
}

/// Kendall tau-b by counting every pair once.
///
/// Undefined when either side is constant; 1.0 when both are, else 0.0.
pub fn tau_b(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].partial_cmp(&a[j]).unwrap();
            let db = b[i].partial_cmp(&b[j]).unwrap();
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => ties_a += 1,
                (_, Equal) => ties_b += 1,
                (x, y) if x == y => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let left = (concordant + discordant + ties_a) as f64;
    let right = (concordant + discordant + ties_b) as f64;
    if left == 0.0 || right == 0.0 {
        return if left == 0.0 && right == 0.0 { 1.0 } else { 0.0 };
    }
    (concordant - discordant) as f64 / (left * right).sqrt()
}

/// Indices whose inspection leaves the fewest expected misclassifications
/// when every other point takes its most likely grade.
pub fn best_inspection_set(pool: &[Vec<f64>]) -> Vec<usize> {
    let miss: Vec<f64> = pool
        .iter()
        .map(|p| 1.0 - p.iter().copied().fold(f64::MIN, f64::max))
        .collect();
    let total: f64 = miss.iter().sum();
    let left: Vec<f64> = miss.iter().map(|m| total - m).collect();
    let best = left.iter().copied().fold(f64::MAX, f64::min);
    (0..pool.len()).filter(|&i| left[i] - best <= 1e-12).collect()
}

/// Indices whose gap between the two largest probabilities is minimal.
pub fn smallest_margin_set(pool: &[Vec<f64>]) -> Vec<usize> {
    let gap = |p: &Vec<f64>| {
        let mut s = p.clone();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        s[0] - s[1]
    };
    let gaps: Vec<f64> = pool.iter().map(gap).collect();
    let min = gaps.iter().copied().fold(f64::MAX, f64::min);
    (0..pool.len()).filter(|&i| gaps[i] - min <= 1e-12).collect()
}

/// One-sided sign test: P(X >= wins) for X ~ Binomial(wins + losses, 1/2).
pub fn sign_test_p(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in wins..=n {
        let mut c = 1.0;
        for i in 0..k {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        p += c;
    }
    p / 2f64.powi(n as i32)
}
