//! Calibration of LLM grade vectors against human judgments.
//!
//! A [`Calibrator`] maps an LLM vector `pi` to an estimate of the true grade
//! distribution. It starts as the identity and becomes a multinomial logistic
//! model over clipped-logit features `[1, logit(pi_0), .., logit(pi_l)]` once
//! enough judgments exist. One model covers all grades, so outputs are always
//! a distribution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::collection::PairId;
use crate::grades::{self, Grade, GradeVector};

/// Clip range applied to each `pi` component before taking the logit.
pub const PI_CLIP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Below this many samples the identity calibrator is returned.
    pub min_fit_samples: usize,
    pub l2: f64,
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            min_fit_samples: 10,
            l2: 1e-3,
            gradient_tolerance: 1e-6,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibratorKind {
    Identity,
    MultinomialLogistic,
}

/// Snapshot-friendly calibrator. `weights` is `(l+1) x (l+2)`, row per grade,
/// column 0 the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    pub kind: CalibratorKind,
    pub max_grade: Grade,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<Vec<f64>>,
}

/// Top-two calibrated grades and their probability gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub top: Grade,
    pub second: Grade,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginRecord {
    pub pair_id: PairId,
    pub top: Grade,
    pub second: Grade,
    pub margin: f64,
}

pub fn clipped_logit(p: f64) -> f64 {
    let p = p.clamp(PI_CLIP, 1.0 - PI_CLIP);
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Number of features for `l+1` grades: bias plus one logit per grade.
pub fn feature_len(max_grade: Grade) -> usize {
    max_grade as usize + 2
}

/// Writes `[1, logit(pi_0), .., logit(pi_l)]` into `out`.
pub fn features_into(pi: &[f64], out: &mut [f64]) {
    out[0] = 1.0;
    for (o, &p) in out[1..].iter_mut().zip(pi) {
        *o = clipped_logit(p);
    }
}

pub fn features(pi: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; pi.len() + 1];
    features_into(pi, &mut out);
    out
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

impl Calibrator {
    pub fn identity(max_grade: Grade) -> Self {
        Self {
            kind: CalibratorKind::Identity,
            max_grade,
            weights: Vec::new(),
        }
    }

    /// Logistic calibrator from a flat row-major weight vector.
    pub fn logistic(max_grade: Grade, flat: &[f64]) -> Self {
        let p = feature_len(max_grade);
        assert_eq!(flat.len(), (max_grade as usize + 1) * p, "weight shape");
        Self {
            kind: CalibratorKind::MultinomialLogistic,
            max_grade,
            weights: flat.chunks(p).map(<[f64]>::to_vec).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.kind == CalibratorKind::Identity
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.weights.iter().flatten().copied().collect()
    }

    /// Calibrated distribution for precomputed features; writes into `out`.
    pub fn predict_features(&self, pi: &[f64], feats: &[f64], out: &mut [f64]) {
        match self.kind {
            CalibratorKind::Identity => out.copy_from_slice(pi),
            CalibratorKind::MultinomialLogistic => {
                for (o, row) in out.iter_mut().zip(&self.weights) {
                    *o = row.iter().zip(feats).map(|(w, x)| w * x).sum();
                }
                softmax_in_place(out);
            }
        }
    }

    pub fn predict(&self, pi: &GradeVector) -> GradeVector {
        let probs = pi.probs();
        let mut out = vec![0.0; probs.len()];
        match self.kind {
            CalibratorKind::Identity => out.copy_from_slice(probs),
            CalibratorKind::MultinomialLogistic => {
                let f = features(probs);
                self.predict_features(probs, &f, &mut out);
            }
        }
        GradeVector::from_normalized(out)
    }

    pub fn margin(&self, pi: &GradeVector) -> Margin {
        let p = self.predict(pi);
        let (k, s, gap) = grades::top_two(p.probs());
        Margin {
            top: k as Grade,
            second: s as Grade,
            value: gap,
        }
    }

    pub fn margin_record(&self, pair_id: PairId, pi: &GradeVector) -> MarginRecord {
        let m = self.margin(pi);
        MarginRecord {
            pair_id,
            top: m.top,
            second: m.second,
            margin: m.value,
        }
    }

    /// Fits on `(pi, y)` samples. Falls back to the identity below
    /// `min_fit_samples` or when every label shares one grade.
    pub fn fit(samples: &[(GradeVector, Grade)], max_grade: Grade, config: &FitConfig) -> Self {
        let p = feature_len(max_grade);
        let mut feats = vec![0.0; samples.len() * p];
        let mut labels = Vec::with_capacity(samples.len());
        for (i, (pi, y)) in samples.iter().enumerate() {
            features_into(pi.probs(), &mut feats[i * p..(i + 1) * p]);
            labels.push(*y);
        }
        Self::fit_features(&feats, &labels, max_grade, config, None)
    }

    /// Fits on a row-major feature matrix. `warm_start` seeds the optimizer;
    /// the optimum is unique (the objective is strictly convex) so it only
    /// affects speed.
    pub fn fit_features(
        feats: &[f64],
        labels: &[Grade],
        max_grade: Grade,
        config: &FitConfig,
        warm_start: Option<&Calibrator>,
    ) -> Self {
        let n = labels.len();
        if n < config.min_fit_samples.max(1) || labels.iter().all(|&y| y == labels[0]) {
            return Self::identity(max_grade);
        }
        let problem = Objective {
            feats,
            labels,
            classes: max_grade as usize + 1,
            dim: feature_len(max_grade),
            l2: config.l2,
        };
        let init = warm_start
            .filter(|c| !c.is_identity() && c.max_grade == max_grade)
            .map(Calibrator::flat_weights)
            .unwrap_or_else(|| vec![0.0; problem.classes * problem.dim]);
        let weights = problem.minimize(init, config);
        Self::logistic(max_grade, &weights)
    }
}

/// Mean negative log-likelihood of the multinomial model plus `l2/2 * |W|^2`.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub feats: &'a [f64],
    pub labels: &'a [Grade],
    pub classes: usize,
    pub dim: usize,
    pub l2: f64,
}

impl Objective<'_> {
    fn logits(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        for (a, o) in out.iter_mut().enumerate() {
            let row = &w[a * self.dim..(a + 1) * self.dim];
            *o = row.iter().zip(x).map(|(w, x)| w * x).sum();
        }
    }

    pub fn value(&self, w: &[f64]) -> f64 {
        let n = self.labels.len();
        let mut z = vec![0.0; self.classes];
        let mut nll = 0.0;
        for i in 0..n {
            let x = &self.feats[i * self.dim..(i + 1) * self.dim];
            self.logits(w, x, &mut z);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            nll += lse - z[self.labels[i] as usize];
        }
        nll / n as f64 + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let (g, _) = self.gradient_hessian(w, false);
        g
    }

    /// Gradient, and the upper-triangular Hessian when `with_hessian`.
    fn gradient_hessian(&self, w: &[f64], with_hessian: bool) -> (Vec<f64>, Vec<f64>) {
        let e = self.evaluate(w, with_hessian);
        (e.grad, e.hess)
    }

    /// Objective value, gradient and (optionally) the upper-triangular
    /// Hessian in a single pass over the samples.
    fn evaluate(&self, w: &[f64], with_hessian: bool) -> Evaluation {
        let (k, d) = (self.classes, self.dim);
        let m = k * d;
        let n = self.labels.len();
        let mut grad = vec![0.0; m];
        let mut hess = if with_hessian { vec![0.0; m * m] } else { Vec::new() };
        let mut p = vec![0.0; k];
        let mut nll = 0.0;
        for i in 0..n {
            let x = &self.feats[i * d..(i + 1) * d];
            self.logits(w, x, &mut p);
            let y = self.labels[i] as usize;
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let zy = p[y];
            let mut sum = 0.0;
            for v in p.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            nll += max + sum.ln() - zy;
            for v in p.iter_mut() {
                *v /= sum;
            }
            for a in 0..k {
                let r = p[a] - f64::from(u8::from(a == y));
                for f in 0..d {
                    grad[a * d + f] += r * x[f];
                }
            }
            if with_hessian {
                for a in 0..k {
                    for b in a..k {
                        let c = if a == b { p[a] * (1.0 - p[a]) } else { -p[a] * p[b] };
                        for f in 0..d {
                            let cf = c * x[f];
                            let row = (a * d + f) * m;
                            let g0 = if a == b { f } else { 0 };
                            for g in g0..d {
                                hess[row + b * d + g] += cf * x[g];
                            }
                        }
                    }
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for (g, wv) in grad.iter_mut().zip(w) {
            *g = *g * inv_n + self.l2 * wv;
        }
        if with_hessian {
            for v in hess.iter_mut() {
                *v *= inv_n;
            }
            for j in 0..m {
                hess[j * m + j] += self.l2;
            }
        }
        Evaluation {
            value: nll * inv_n + 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>(),
            grad,
            hess,
        }
    }

    /// Damped Newton iterations until the gradient norm drops below the
    /// tolerance. Each accepted point is evaluated once for value, gradient
    /// and Hessian together.
    fn minimize(&self, mut w: Vec<f64>, config: &FitConfig) -> Vec<f64> {
        let m = w.len();
        let mut current = self.evaluate(&w, true);
        for _ in 0..config.max_iterations {
            let norm = current.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm < config.gradient_tolerance {
                break;
            }
            let upper = &current.hess;
            let h = DMatrix::from_fn(m, m, |i, j| {
                if i <= j {
                    upper[i * m + j]
                } else {
                    upper[j * m + i]
                }
            });
            let g = DVector::from_column_slice(&current.grad);
            let step = match h.cholesky() {
                Some(ch) => ch.solve(&g),
                None => g.clone(),
            };
            let slope: f64 = -step.dot(&g);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = w.iter().zip(step.iter()).map(|(w, s)| w - t * s).collect();
                let eval = self.evaluate(&cand, true);
                if eval.value <= current.value + 1e-4 * t * slope {
                    w = cand;
                    current = eval;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        w
    }
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

/// Pair with its true conditional grade distribution (synthetic pools only).
#[derive(Debug, Clone, PartialEq)]
pub struct TrueConditional {
    pub pair_id: PairId,
    pub probs: Vec<f64>,
}

/// Brute-force choice of the point whose annotation minimizes the expected
/// number of errors left when every other point is labelled by its argmax.
///
/// For each candidate `i`, the remaining error is `sum_{j != i} (1 - max p_j)`.
/// Ties go to the lowest pair id.
pub fn optimal_inspection_oracle(pool: &[TrueConditional]) -> PairId {
    assert!(!pool.is_empty(), "pool must not be empty");
    let mut best: Option<(f64, PairId)> = None;
    for (i, cand) in pool.iter().enumerate() {
        let mut remaining = 0.0;
        for (j, other) in pool.iter().enumerate() {
            if j != i {
                let top = other.probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                remaining += 1.0 - top;
            }
        }
        let better = match best {
            None => true,
            Some((err, id)) => {
                remaining < err - 1e-12 || ((remaining - err).abs() <= 1e-12 && cand.pair_id < id)
            }
        };
        if better {
            best = Some((remaining, cand.pair_id));
        }
    }
    best.unwrap().1
}

/// Minimum true top-two margin in the pool and every pair attaining it.
pub fn smallest_margin_points(pool: &[TrueConditional]) -> (f64, Vec<PairId>) {
    let margins: Vec<f64> = pool.iter().map(|c| grades::top_two(&c.probs).2).collect();
    let min = margins.iter().copied().fold(f64::INFINITY, f64::min);
    let ids = pool
        .iter()
        .zip(&margins)
        .filter(|(_, &m)| (m - min).abs() <= 1e-12)
        .map(|(c, _)| c.pair_id)
        .collect();
    (min, ids)
}

/// One point of a `pi`-grid versus calibrated-output curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Grade whose raw probability is varied along the grid.
    pub grade: Grade,
    pub pi: Vec<f64>,
    pub calibrated: Vec<f64>,
}

/// For each grade `j`, sweeps `pi_j` over `steps + 1` grid points with the
/// remaining mass spread evenly over the other grades.
pub fn calibration_curve(cal: &Calibrator, steps: usize) -> Vec<CurvePoint> {
    let k = cal.max_grade as usize + 1;
    let mut out = Vec::new();
    for j in 0..k {
        if k == 2 && j == 0 {
            continue;
        }
        for s in 0..=steps {
            let x = s as f64 / steps as f64;
            let rest = (1.0 - x) / (k - 1) as f64;
            let pi: Vec<f64> = (0..k).map(|g| if g == j { x } else { rest }).collect();
            let calibrated = cal.predict(&GradeVector::from_normalized(pi.clone()));
            out.push(CurvePoint {
                grade: j as Grade,
                pi,
                calibrated: calibrated.probs().to_vec(),
            });
        }
    }
    out
}

/// Empirical reliability bin for the binarized relevance rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_pi: f64,
    pub relevant_rate: f64,
}

/// Bins LLM relevant mass (sum of `pi_j` over grades above `l/2`) and reports
/// the observed relevant rate in each bin. Empty bins are omitted.
pub fn reliability_bins(samples: &[(GradeVector, Grade)], bins: usize) -> Vec<ReliabilityBin> {
    let mut count = vec![0usize; bins];
    let mut sum_pi = vec![0.0; bins];
    let mut rel = vec![0usize; bins];
    for (pi, y) in samples {
        let l = pi.max_grade();
        let mass: f64 = (0..=l)
            .filter(|&g| grades::binarize(g, l) == 1)
            .map(|g| pi.get(g))
            .sum();
        let b = ((mass * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        sum_pi[b] += mass;
        rel[b] += grades::binarize(*y, l) as usize;
    }
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| ReliabilityBin {
            lower: b as f64 / bins as f64,
            upper: (b + 1) as f64 / bins as f64,
            count: count[b],
            mean_pi: sum_pi[b] / count[b] as f64,
            relevant_rate: rel[b] as f64 / count[b] as f64,
        })
        .collect()
}
