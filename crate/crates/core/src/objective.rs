//! Losses and their per-sample first and second derivatives.
//!
//! Scores are an `n x C` matrix (`C = 1` except for multi-class). Every
//! objective is registered under the name used on the command line and in
//! model files.

use crate::error::{GbunError, Result};
use crate::forward::softmax_slice;
use crate::matrix::Matrix;
use crate::registry::Registry;

/// Gradients and Hessians, both `n x C`, with `h >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHess {
    pub g: Matrix,
    pub h: Matrix,
}

impl GradHess {
    /// Column `c` of `g` and `h`.
    pub fn class(&self, c: usize) -> (Vec<f64>, Vec<f64>) {
        (self.g.column(c), self.h.column(c))
    }
}

pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Score columns for a problem with `num_classes` classes.
    fn num_outputs(&self, num_classes: usize) -> usize;

    fn check_labels(&self, labels: &[f64], num_outputs: usize) -> Result<()>;

    fn grad_hess(&self, scores: &Matrix, labels: &[f64]) -> Result<GradHess>;

    /// Loss of a single sample.
    fn sample_loss(&self, scores: &[f64], label: f64) -> f64;

    /// Mean loss over all rows.
    fn mean_loss(&self, scores: &Matrix, labels: &[f64]) -> f64 {
        if labels.is_empty() {
            return 0.0;
        }
        self.loss_sum(scores, labels) / labels.len() as f64
    }

    fn loss_sum(&self, scores: &Matrix, labels: &[f64]) -> f64 {
        (0..scores.rows())
            .map(|i| self.sample_loss(scores.row(i), labels[i]))
            .sum()
    }

    /// Maps a row of scores to the prediction scale (probabilities for
    /// classifiers), in place.
    fn transform(&self, scores: &mut [f64]);

    /// Validation metric reported by default.
    fn default_metric(&self) -> &'static str;
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_shape(scores: &Matrix, labels: &[f64], cols: usize) -> Result<()> {
    if scores.rows() != labels.len() || scores.cols() != cols {
        return Err(GbunError::data(format!(
            "scores are {}x{}, expected {}x{cols}",
            scores.rows(),
            scores.cols(),
            labels.len()
        )));
    }
    Ok(())
}

/// Binary cross-entropy on the logit scale; labels in `{0, 1}`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Logistic;

impl Objective for Logistic {
    fn name(&self) -> &'static str {
        "binary:logistic"
    }

    fn num_outputs(&self, _num_classes: usize) -> usize {
        1
    }

    fn check_labels(&self, labels: &[f64], _num_outputs: usize) -> Result<()> {
        match labels.iter().position(|&y| y != 0.0 && y != 1.0) {
            Some(i) => Err(GbunError::data(format!(
                "binary:logistic needs labels in {{0, 1}}; sample {i} has {}",
                labels[i]
            ))),
            None => Ok(()),
        }
    }

    fn grad_hess(&self, scores: &Matrix, labels: &[f64]) -> Result<GradHess> {
        check_shape(scores, labels, 1)?;
        self.check_labels(labels, 1)?;
        let n = labels.len();
        let mut g = Matrix::zeros(n, 1);
        let mut h = Matrix::zeros(n, 1);
        for (i, &y) in labels.iter().enumerate() {
            let p = sigmoid(scores.get(i, 0));
            g.set(i, 0, p - y);
            h.set(i, 0, p * (1.0 - p));
        }
        Ok(GradHess { g, h })
    }

    fn sample_loss(&self, scores: &[f64], label: f64) -> f64 {
        softplus(scores[0]) - label * scores[0]
    }

    fn transform(&self, scores: &mut [f64]) {
        scores[0] = sigmoid(scores[0]);
    }

    fn default_metric(&self) -> &'static str {
        "auc"
    }
}

/// `0.5 (yhat - y)^2`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Squared;

impl Objective for Squared {
    fn name(&self) -> &'static str {
        "reg:squared"
    }

    fn num_outputs(&self, _num_classes: usize) -> usize {
        1
    }

    fn check_labels(&self, labels: &[f64], _num_outputs: usize) -> Result<()> {
        match labels.iter().position(|y| !y.is_finite()) {
            Some(i) => Err(GbunError::data(format!("sample {i} has a non-finite label"))),
            None => Ok(()),
        }
    }

    fn grad_hess(&self, scores: &Matrix, labels: &[f64]) -> Result<GradHess> {
        check_shape(scores, labels, 1)?;
        let n = labels.len();
        let g = Matrix::from_vec(
            n,
            1,
            labels.iter().enumerate().map(|(i, y)| scores.get(i, 0) - y).collect(),
        );
        Ok(GradHess {
            g,
            h: Matrix::from_vec(n, 1, vec![1.0; n]),
        })
    }

    fn sample_loss(&self, scores: &[f64], label: f64) -> f64 {
        0.5 * (scores[0] - label).powi(2)
    }

    fn transform(&self, _scores: &mut [f64]) {}

    fn default_metric(&self) -> &'static str {
        "rmse"
    }
}

/// Multi-class cross-entropy over a softmax of the `C` score columns, with
/// the diagonal Hessian approximation `q (1 - q)`.
#[derive(Debug, Default, Clone, Copy)]
pub struct Softmax;

impl Softmax {
    fn class_of(label: f64, num_classes: usize) -> Option<usize> {
        (label >= 0.0 && label.fract() == 0.0 && (label as usize) < num_classes).then_some(label as usize)
    }
}

impl Objective for Softmax {
    fn name(&self) -> &'static str {
        "multi:softmax"
    }

    fn num_outputs(&self, num_classes: usize) -> usize {
        num_classes
    }

    fn check_labels(&self, labels: &[f64], num_outputs: usize) -> Result<()> {
        if num_outputs < 2 {
            return Err(GbunError::config("multi:softmax needs at least 2 classes"));
        }
        match labels
            .iter()
            .position(|&y| Self::class_of(y, num_outputs).is_none())
        {
            Some(i) => Err(GbunError::data(format!(
                "sample {i} has label {} outside the {num_outputs} classes [0, {num_outputs})",
                labels[i]
            ))),
            None => Ok(()),
        }
    }

    fn grad_hess(&self, scores: &Matrix, labels: &[f64]) -> Result<GradHess> {
        let c = scores.cols();
        check_shape(scores, labels, c)?;
        self.check_labels(labels, c)?;
        let n = labels.len();
        let mut g = Matrix::zeros(n, c);
        let mut h = Matrix::zeros(n, c);
        let mut q = vec![0.0; c];
        for (i, &y) in labels.iter().enumerate() {
            q.copy_from_slice(scores.row(i));
            softmax_slice(&mut q);
            let y = y as usize;
            for (k, &qk) in q.iter().enumerate() {
                g.set(i, k, qk - f64::from(u8::from(k == y)));
                h.set(i, k, qk * (1.0 - qk));
            }
        }
        Ok(GradHess { g, h })
    }

    fn sample_loss(&self, scores: &[f64], label: f64) -> f64 {
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        lse - scores[label as usize]
    }

    fn transform(&self, scores: &mut [f64]) {
        softmax_slice(scores);
    }

    fn default_metric(&self) -> &'static str {
        "map"
    }
}

pub type ObjectiveFactory = fn() -> Box<dyn Objective>;

pub fn objective_registry() -> Registry<ObjectiveFactory> {
    let mut reg: Registry<ObjectiveFactory> = Registry::new("objective");
    reg.register("binary:logistic", || Box::new(Logistic))
        .register("multi:softmax", || Box::new(Softmax))
        .register("reg:squared", || Box::new(Squared));
    reg
}

pub fn objective_by_name(name: &str) -> Result<Box<dyn Objective>> {
    Ok((objective_registry().get(name)?)())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn single(obj: &dyn Objective, yhat: f64, y: f64) -> (f64, f64) {
        let gh = obj
            .grad_hess(&Matrix::from_vec(1, 1, vec![yhat]), &[y])
            .unwrap();
        (gh.g.get(0, 0), gh.h.get(0, 0))
    }

    #[test]
    fn logistic_examples() {
        assert_eq!(single(&Logistic, 0.0, 1.0), (-0.5, 0.25));
        assert_eq!(single(&Logistic, 0.0, 0.0), (0.5, 0.25));
        let (g, h) = single(&Logistic, 3f64.ln(), 1.0);
        assert_abs_diff_eq!(g, -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.1875, epsilon = 1e-15);
    }

    #[test]
    fn logistic_rejects_signed_labels() {
        let scores = Matrix::zeros(2, 1);
        assert!(Logistic.grad_hess(&scores, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn squared_examples() {
        assert_eq!(single(&Squared, 3.0, 1.0), (2.0, 1.0));
        assert_eq!(single(&Squared, 1.5, 1.5), (0.0, 1.0));
        assert_eq!(single(&Squared, -1.0, 2.0), (-3.0, 1.0));
    }

    #[test]
    fn softmax_uniform_row() {
        let gh = Softmax.grad_hess(&Matrix::zeros(1, 4), &[0.0]).unwrap();
        assert_eq!(gh.g.row(0), &[-0.75, 0.25, 0.25, 0.25]);
        assert_eq!(gh.h.row(0), &[0.1875; 4]);
    }

    #[test]
    fn softmax_two_classes_is_antisymmetric() {
        let scores = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]);
        let gh = Softmax.grad_hess(&scores, &[1.0, 0.0]).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(gh.g.get(i, 0), -gh.g.get(i, 1), epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_label_range() {
        assert!(Softmax.grad_hess(&Matrix::zeros(1, 3), &[3.0]).is_err());
        assert!(Softmax.grad_hess(&Matrix::zeros(1, 3), &[0.5]).is_err());
        assert!(Softmax.check_labels(&[0.0], 1).is_err());
    }

    #[test]
    fn registry_names() {
        let reg = objective_registry();
        assert_eq!(reg.names(), vec!["binary:logistic", "multi:softmax", "reg:squared"]);
        for name in reg.names() {
            assert_eq!(objective_by_name(name).unwrap().name(), name);
        }
        assert!(objective_by_name("rank:pairwise").is_err());
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero() {
        let scores = Matrix::from_rows(&[vec![0.1, 2.0, -3.0], vec![5.0, 5.0, -1.0]]);
        let gh = Softmax.grad_hess(&scores, &[2.0, 0.0]).unwrap();
        for i in 0..2 {
            assert!(gh.g.row(i).iter().sum::<f64>().abs() < 1e-15);
            assert!(gh.h.row(i).iter().all(|&h| h >= 0.0));
        }
    }
}
