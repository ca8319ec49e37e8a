//! Evaluation metrics: AUC for binary tasks, per-class mean average
//! precision for multi-class, logloss and RMSE as training diagnostics.

use std::cmp::Ordering;
use std::fmt;

use serde::Serialize;

use crate::error::{GbunError, Result};
use crate::matrix::Matrix;

pub const PROB_CLIP: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={:.6}", self.metric, self.value)
    }
}

fn binary_label(y: f64, i: usize) -> Result<bool> {
    match y {
        v if v == 1.0 => Ok(true),
        v if v == 0.0 => Ok(false),
        other => Err(GbunError::data(format!(
            "sample {i} has label {other}, expected 0 or 1"
        ))),
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic, with tied scores
/// sharing their average rank (each tied pair counts one half).
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(GbunError::data("scores and labels differ in length"));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(GbunError::data(format!("score {i} is NaN")));
    }
    let pos = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| binary_label(y, i))
        .collect::<Result<Vec<bool>>>()?;
    let n_pos = pos.iter().filter(|&&p| p).count();
    let n_neg = pos.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(GbunError::data("AUC needs both positive and negative samples"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| pos[i]).count();
        pos_rank_sum += avg_rank * tied_pos as f64;
        start = end;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Average precision of class `c`: rank samples by `probs[., c]` descending
/// (ties by sample index) and average the precision at every positive.
fn average_precision(probs: &Matrix, labels: &[usize], c: usize) -> f64 {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| match probs.get(b, c).total_cmp(&probs.get(a, c)) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == c {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / hits as f64
}

/// One-vs-rest AP averaged over the classes that occur in `labels`.
pub fn mean_average_precision(probs: &Matrix, labels: &[f64]) -> Result<f64> {
    if labels.is_empty() {
        return Err(GbunError::data("mAP of an empty set"));
    }
    if probs.rows() != labels.len() {
        return Err(GbunError::data("probabilities and labels differ in length"));
    }
    let num_classes = probs.cols();
    let classes = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= 0.0 && y.fract() == 0.0 && (y as usize) < num_classes {
                Ok(y as usize)
            } else {
                Err(GbunError::data(format!(
                    "sample {i} has label {y} outside [0, {num_classes})"
                )))
            }
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut present = vec![false; num_classes];
    for &c in &classes {
        present[c] = true;
    }
    let aps: Vec<f64> = (0..num_classes)
        .filter(|&c| present[c])
        .map(|c| average_precision(probs, &classes, c))
        .collect();
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// Mean binary cross-entropy of probabilities `p` against labels in {0, 1}.
pub fn logloss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(GbunError::data("logloss needs equally long, non-empty inputs"));
    }
    let mut total = 0.0;
    for (i, (&p, &y)) in probs.iter().zip(labels).enumerate() {
        let p = clip(p);
        total -= if binary_label(y, i)? { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

/// Mean negative log-probability of the true class.
pub fn multi_logloss(probs: &Matrix, labels: &[f64]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(GbunError::data("logloss needs equally long, non-empty inputs"));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if !(y >= 0.0 && y.fract() == 0.0 && (y as usize) < probs.cols()) {
            return Err(GbunError::data(format!("sample {i} has invalid class {y}")));
        }
        total -= clip(probs.get(i, y as usize)).ln();
    }
    Ok(total / labels.len() as f64)
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(GbunError::data("rmse needs equally long, non-empty inputs"));
    }
    let sq: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((sq / preds.len() as f64).sqrt())
}

pub const METRICS: [&str; 4] = ["auc", "map", "logloss", "rmse"];

/// Computes `metric` on predictions already mapped to the output scale
/// (probabilities for classifiers). Single-column input is a binary or
/// regression problem.
pub fn evaluate(metric: &str, preds: &Matrix, labels: &[f64]) -> Result<EvalResult> {
    let single = preds.cols() == 1;
    let value = match (metric, single) {
        ("auc", true) => auc(preds.as_slice(), labels)?,
        ("auc", false) => {
            return Err(GbunError::config("auc needs single-column binary predictions"))
        }
        ("map", false) => mean_average_precision(preds, labels)?,
        ("map", true) => {
            return Err(GbunError::config("map needs one probability column per class"))
        }
        ("logloss", true) => logloss(preds.as_slice(), labels)?,
        ("logloss", false) => multi_logloss(preds, labels)?,
        ("rmse", true) => rmse(preds.as_slice(), labels)?,
        ("rmse", false) => {
            return Err(GbunError::config("rmse needs single-column predictions"))
        }
        (other, _) => {
            return Err(GbunError::UnknownStrategy {
                kind: "metric",
                name: other.to_string(),
                available: METRICS.join(", "),
            })
        }
    };
    Ok(EvalResult {
        metric: metric.to_string(),
        value,
        n: labels.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Pairwise definition, quadratic but obviously right.
    fn auc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1.0 && yj == 0.0 {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4], &[1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        assert!(auc(&[0.1, 0.2], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn map_perfect_is_one() {
        let probs = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ]);
        let v = mean_average_precision(&probs, &[0.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn map_hand_computed_n4() {
        // class 0 positives are samples 0 and 1, ranked last for class 0
        let probs = Matrix::from_rows(&[
            vec![0.1, 0.9],
            vec![0.2, 0.8],
            vec![0.7, 0.3],
            vec![0.6, 0.4],
        ]);
        let labels = [0.0, 0.0, 1.0, 1.0];
        // class 0 order: 2, 3, 1, 0 -> positives at ranks 3, 4: (1/3 + 2/4) / 2
        let ap0 = (1.0 / 3.0 + 2.0 / 4.0) / 2.0;
        // class 1 order: 0, 1, 3, 2 -> positives at ranks 3, 4
        let ap1 = (1.0 / 3.0 + 2.0 / 4.0) / 2.0;
        let v = mean_average_precision(&probs, &labels).unwrap();
        assert_abs_diff_eq!(v, (ap0 + ap1) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn map_uniform_breaks_ties_by_index() {
        let probs = Matrix::from_rows(&vec![vec![0.5, 0.5]; 4]);
        let labels = [1.0, 0.0, 1.0, 0.0];
        // both classes rank samples 0, 1, 2, 3
        let ap0 = (1.0 / 2.0 + 2.0 / 4.0) / 2.0;
        let ap1 = (1.0 / 1.0 + 2.0 / 3.0) / 2.0;
        let v = mean_average_precision(&probs, &labels).unwrap();
        assert_abs_diff_eq!(v, (ap0 + ap1) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn map_skips_absent_classes() {
        let probs = Matrix::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.1, 0.1, 0.8]]);
        assert_eq!(mean_average_precision(&probs, &[0.0, 2.0]).unwrap(), 1.0);
        assert!(mean_average_precision(&Matrix::zeros(0, 3), &[]).is_err());
    }

    #[test]
    fn logloss_examples() {
        assert_abs_diff_eq!(logloss(&[0.5], &[1.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(logloss(&[1.0 - 1e-15], &[1.0]).unwrap() < 1e-14);
        assert_abs_diff_eq!(logloss(&[0.75], &[0.0]).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert!(logloss(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn evaluate_dispatch() {
        let preds = Matrix::from_vec(2, 1, vec![0.9, 0.1]);
        let r = evaluate("auc", &preds, &[1.0, 0.0]).unwrap();
        assert_eq!(r.to_string(), "auc=1.000000");
        assert!(evaluate("map", &preds, &[1.0, 0.0]).is_err());
        assert!(matches!(
            evaluate("ndcg", &preds, &[1.0, 0.0]),
            Err(GbunError::UnknownStrategy { .. })
        ));
    }

    fn binary_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec((-20i32..20).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(prop::bool::ANY, n),
            )
                .prop_filter_map("needs both classes", |(s, y)| {
                    let labels: Vec<f64> = y.iter().map(|&b| f64::from(u8::from(b))).collect();
                    (y.iter().any(|&b| b) && y.iter().any(|&b| !b)).then_some((s, labels))
                })
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count((scores, labels) in binary_case()) {
            let a = auc(&scores, &labels).unwrap();
            prop_assert!((a - auc_pairs(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn auc_invariant_under_increasing_maps((scores, labels) in binary_case()) {
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp() * 7.0 - 2.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        }

        #[test]
        fn map_of_permuted_perfect_probs_is_one(
            classes in prop::collection::vec(0usize..5, 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm: Vec<usize> = (0..classes.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let rows: Vec<Vec<f64>> = perm
                .iter()
                .map(|&i| (0..5).map(|c| f64::from(u8::from(c == classes[i]))).collect())
                .collect();
            let labels: Vec<f64> = perm.iter().map(|&i| classes[i] as f64).collect();
            let v = mean_average_precision(&Matrix::from_rows(&rows), &labels).unwrap();
            prop_assert_eq!(v, 1.0);
        }

        #[test]
        fn map_is_in_unit_interval(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..30),
            seed in any::<u64>(),
        ) {
            let labels: Vec<f64> = (0..rows.len()).map(|i| ((seed >> (i % 60)) % 3) as f64).collect();
            let v = mean_average_precision(&Matrix::from_rows(&rows), &labels).unwrap();
            prop_assert!(v > 0.0 && v <= 1.0);
        }
    }
}
