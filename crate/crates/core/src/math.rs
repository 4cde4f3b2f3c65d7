// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric kernels and evaluation statistics.
//!
//! Everything here is double precision. The metric recurrences divide norms
//! that routinely differ by two orders of magnitude, so single precision is
//! not an option.

use std::collections::HashSet;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{GuideError, Result};

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Zero matrix. Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GuideError::InvalidDimensions { rows, cols });
        }
        if data.len() != rows * cols {
            return Err(GuideError::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GuideError::NonFinite { what: "matrix" });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(GuideError::LengthMismatch {
                left: bad.len(),
                right: cols,
            });
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(GuideError::LengthMismatch {
                left: self.cols,
                right: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            vec_mat_into(self.row(r), other, out.row_mut(r));
        }
        Ok(out)
    }
}

/// `out = x · m` for a row vector `x`. `out` is overwritten.
pub(crate) fn vec_mat_into(x: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.fill(0.0);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += xi * w;
        }
    }
}

// ---------------------------------------------------------------------------
// Vector kernels
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Shift-stabilised softmax, in place. Assumes finite input.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `softmax(logits + bias)`.
///
/// This is the attention-score computation with an additive per-key bias.
/// The result is invariant to adding a constant to every logit.
pub fn softmax_biased(logits: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != bias.len() {
        return Err(GuideError::LengthMismatch {
            left: logits.len(),
            right: bias.len(),
        });
    }
    if logits.is_empty() {
        return Err(GuideError::EmptyInput("softmax input"));
    }
    if logits.iter().chain(bias).any(|v| !v.is_finite()) {
        return Err(GuideError::NonFinite { what: "softmax input" });
    }
    let mut out: Vec<f64> = logits.iter().zip(bias).map(|(w, b)| w + b).collect();
    softmax_in_place(&mut out);
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    softmax_biased(logits, &vec![0.0; logits.len()])
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// A scored example with a binary label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSample {
    pub score: f64,
    pub label: bool,
}

impl StatSample {
    pub fn new(score: f64, label: bool) -> Self {
        Self { score, label }
    }
}

/// ROC AUC as the fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
///
/// Runs in O(n log n) by sorting and sweeping tie groups; pair counts are
/// accumulated as integers so the result is exact up to the final division.
pub fn roc_auc(samples: &[StatSample]) -> Result<f64> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(GuideError::NonFinite { what: "AUC score" });
    }
    let positives = samples.iter().filter(|s| s.label).count();
    let negatives = samples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(GuideError::UndefinedAuc { positives, negatives });
    }

    let mut sorted: Vec<StatSample> = samples.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // twice the number of correctly ordered pairs, so ties stay integral
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].label {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Pearson product-moment correlation.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(GuideError::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(GuideError::UndefinedCorrelation("need at least two points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(GuideError::NonFinite {
            what: "correlation input",
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GuideError::UndefinedCorrelation("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between scores and 0/1 labels.
pub fn label_correlation(samples: &[StatSample]) -> Result<f64> {
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<f64> = samples.iter().map(|s| if s.label { 1.0 } else { 0.0 }).collect();
    pearson_corr(&scores, &labels)
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets score 1.0.
pub fn jaccard_keys<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(samples: &[StatSample]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for p in samples.iter().filter(|s| s.label) {
            for n in samples.iter().filter(|s| !s.label) {
                den += 1.0;
                if p.score > n.score {
                    num += 1.0;
                } else if p.score == n.score {
                    num += 0.5;
                }
            }
        }
        num / den
    }

    fn naive_softmax(w: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = w.iter().map(|x| x.exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax_biased(&[0.0; 3], &[0.0; 3]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_ln2_bias() {
        let p = softmax_biased(&[0.0, 0.0], &[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_exp() {
        let p = softmax_biased(&[0.5, -1.2, 3.3], &[1.0, 0.0, 0.0]).unwrap();
        let q = naive_softmax(&[1.5, -1.2, 3.3]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(
            softmax_biased(&[0.0], &[0.0, 1.0]),
            Err(GuideError::LengthMismatch { .. })
        ));
        assert!(matches!(
            softmax_biased(&[f64::NAN], &[0.0]),
            Err(GuideError::NonFinite { .. })
        ));
        assert!(softmax_biased(&[0.0], &[f64::INFINITY]).is_err());
    }

    #[test]
    fn auc_examples() {
        let s = |v: &[(f64, bool)]| v.iter().map(|&(a, b)| StatSample::new(a, b)).collect::<Vec<_>>();
        assert_eq!(roc_auc(&s(&[(0.9, true), (0.1, false)])).unwrap(), 1.0);
        assert_eq!(roc_auc(&s(&[(0.1, true), (0.9, false)])).unwrap(), 0.0);
        let tie = s(&[(0.8, true), (0.8, false), (0.3, false), (0.5, true)]);
        assert_eq!(brute_auc(&tie), 0.625);
        assert_eq!(roc_auc(&tie).unwrap(), 0.625);
    }

    #[test]
    fn auc_single_class_is_error() {
        let only_pos = [StatSample::new(0.3, true), StatSample::new(0.4, true)];
        assert!(matches!(
            roc_auc(&only_pos),
            Err(GuideError::UndefinedAuc {
                positives: 2,
                negatives: 0
            })
        ));
        assert!(roc_auc(&[]).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson_corr(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_corr(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // closed form: x̄=7/3, ȳ=7/3; cov sum = 8/3, sxx = 14/3, syy = 8/3
        let expected = (8.0 / 3.0) / ((14.0f64 / 3.0).sqrt() * (8.0f64 / 3.0).sqrt());
        let got = pearson_corr(&[1.0, 2.0, 4.0], &[1.0, 3.0, 3.0]).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(pearson_corr(&[1.0, 1.0], &[0.0, 1.0]).is_err());
        assert!(pearson_corr(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<HashSet<_>>();
        assert_eq!(jaccard_keys(&set(&["title"]), &set(&["title"])), 1.0);
        assert_eq!(jaccard_keys(&set(&["title"]), &set(&["genre"])), 0.0);
        assert_eq!(
            jaccard_keys(&set(&["title", "genre", "author"]), &set(&["title", "author", "date"])),
            0.5
        );
        assert_eq!(jaccard_keys(&set(&[]), &set(&[])), 1.0);
    }

    #[test]
    fn matrix_basics() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_rows(), vec![vec![2.0, 1.0], vec![4.0, 3.0]]);
        assert!(Matrix::from_vec(0, 2, vec![]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
        assert!(Matrix::from_vec(1, 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            w in prop::collection::vec(-20.0f64..20.0, 1..40),
            shift in -50.0f64..50.0,
        ) {
            let bias = vec![0.0; w.len()];
            let p = softmax_biased(&w, &bias).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            let shifted: Vec<f64> = w.iter().map(|x| x + shift).collect();
            let q = softmax_biased(&shifted, &bias).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn biased_softmax_is_exp_delta_renormalisation(
            w in prop::collection::vec(-10.0f64..10.0, 1..30),
            mask in prop::collection::vec(any::<bool>(), 30),
            delta in 0.0f64..5.0,
        ) {
            let bias: Vec<f64> = (0..w.len()).map(|i| if mask[i] { delta } else { 0.0 }).collect();
            let biased = softmax_biased(&w, &bias).unwrap();
            let base = softmax(&w).unwrap();
            let scaled: Vec<f64> = base.iter().enumerate()
                .map(|(i, p)| if mask[i] { p * delta.exp() } else { *p })
                .collect();
            let z: f64 = scaled.iter().sum();
            for (a, b) in biased.iter().zip(&scaled) {
                prop_assert!((a - b / z).abs() < 1e-12);
            }
        }

        #[test]
        fn auc_matches_pair_count(
            data in prop::collection::vec((0u8..6, any::<bool>()), 2..60),
        ) {
            // coarse scores produce plenty of ties
            let samples: Vec<StatSample> = data.iter()
                .map(|&(s, l)| StatSample::new(f64::from(s) / 5.0, l))
                .collect();
            match roc_auc(&samples) {
                Ok(v) => prop_assert!((v - brute_auc(&samples)).abs() < 1e-12),
                Err(GuideError::UndefinedAuc { .. }) => {
                    prop_assert!(samples.iter().all(|s| s.label) || samples.iter().all(|s| !s.label));
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn pearson_in_unit_interval(
            pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..50),
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Ok(r) = pearson_corr(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
