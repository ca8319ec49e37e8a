//! Analytic gradients and Hessians against central finite differences.
//!
//! `g` is checked against differences of the loss. `h` is checked against
//! differences of the analytic `g`: a second difference of the loss at a
//! usable step is dominated by rounding.

use gbun::matrix::Matrix;
use gbun::objective::{objective_by_name, Objective};
use proptest::prelude::*;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= TOL * analytic.abs().max(1.0)
}

fn grad_hess_row(obj: &dyn Objective, scores: &[f64], label: f64) -> (Vec<f64>, Vec<f64>) {
    let m = Matrix::from_vec(1, scores.len(), scores.to_vec());
    let gh = obj.grad_hess(&m, &[label]).unwrap();
    (gh.g.row(0).to_vec(), gh.h.row(0).to_vec())
}

fn check_point(obj: &dyn Objective, scores: &[f64], label: f64) -> Result<(), TestCaseError> {
    let (g, h) = grad_hess_row(obj, scores, label);
    for c in 0..scores.len() {
        let mut up = scores.to_vec();
        let mut down = scores.to_vec();
        up[c] += STEP;
        down[c] -= STEP;
        let fd_g = (obj.sample_loss(&up, label) - obj.sample_loss(&down, label)) / (2.0 * STEP);
        prop_assert!(close(g[c], fd_g), "{} g[{c}]: {} vs {fd_g}", obj.name(), g[c]);
        let fd_h = (grad_hess_row(obj, &up, label).0[c] - grad_hess_row(obj, &down, label).0[c])
            / (2.0 * STEP);
        prop_assert!(close(h[c], fd_h), "{} h[{c}]: {} vs {fd_h}", obj.name(), h[c]);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn logistic(score in -8.0f64..8.0, positive in any::<bool>()) {
        let obj = objective_by_name("binary:logistic").unwrap();
        check_point(obj.as_ref(), &[score], f64::from(u8::from(positive)))?;
    }

    #[test]
    fn squared(score in -50.0f64..50.0, label in -50.0f64..50.0) {
        let obj = objective_by_name("reg:squared").unwrap();
        check_point(obj.as_ref(), &[score], label)?;
    }

    #[test]
    fn softmax(scores in prop::collection::vec(-6.0f64..6.0, 2..8), pick in any::<prop::sample::Index>()) {
        let obj = objective_by_name("multi:softmax").unwrap();
        let label = pick.index(scores.len()) as f64;
        check_point(obj.as_ref(), &scores, label)?;
    }
}

#[test]
fn hessians_are_nonnegative() {
    let obj = objective_by_name("multi:softmax").unwrap();
    let scores = Matrix::from_rows(&[vec![700.0, -700.0, 0.0], vec![0.0, 0.0, 0.0]]);
    let gh = obj.grad_hess(&scores, &[1.0, 2.0]).unwrap();
    assert!(gh.h.as_slice().iter().all(|&v| v >= 0.0));
    assert!(gh.g.as_slice().iter().all(|v| v.is_finite()));
}
