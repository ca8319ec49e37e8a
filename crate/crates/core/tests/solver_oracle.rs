//! The closed-form round solve against an independent minimizer of the
//! per-sample second-order objective, and the hard-assignment special case.

use gbun::forward::softmax_rows;
use gbun::matrix::Matrix;
use gbun::solver::{accumulate_ab, solve_weights};
use proptest::prelude::*;

/// `sum_i g_i s_i + h_i s_i^2 / 2 + lambda |w|^2 / 2` with `s_i = <P_i, w>`,
/// evaluated sample by sample.
fn explicit_objective(p: &Matrix, g: &[f64], h: &[f64], lambda: f64, w: &[f64]) -> f64 {
    let mut total = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().zip(w).map(|(a, b)| a * b).sum();
        total += g[i] * s + 0.5 * h[i] * s * s;
    }
    total
}

/// Plain gradient descent on the explicit objective.
fn descend(p: &Matrix, g: &[f64], h: &[f64], lambda: f64, steps: usize) -> Vec<f64> {
    let k = p.cols();
    // P rows are probability vectors, so sum_i h_i |P_i|^2 bounds the curvature
    let lipschitz: f64 = lambda
        + (0..p.rows())
            .map(|i| h[i] * p.row(i).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>();
    let rate = 1.0 / lipschitz.max(1e-12);
    let mut w = vec![0.0; k];
    let mut grad = vec![0.0; k];
    for _ in 0..steps {
        grad.iter_mut().zip(&w).for_each(|(d, wj)| *d = lambda * wj);
        for i in 0..p.rows() {
            let s: f64 = p.row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
            let coef = g[i] + h[i] * s;
            for (d, pij) in grad.iter_mut().zip(p.row(i)) {
                *d += coef * pij;
            }
        }
        w.iter_mut().zip(&grad).for_each(|(wj, d)| *wj -= rate * d);
    }
    w
}

fn instance() -> impl Strategy<Value = (Matrix, Vec<f64>, Vec<f64>, f64)> {
    (1usize..=20, 2usize..=5, 0usize..3).prop_flat_map(|(n, k, li)| {
        (
            prop::collection::vec(-3.0f64..3.0, n * k),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(0.05f64..1.0, n),
            Just([0.0, 0.5, 1.0][li]),
        )
            .prop_map(move |(z, g, h, lambda)| {
                let p = softmax_rows(&Matrix::from_vec(n, k, z)).unwrap();
                (p, g, h, lambda)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solve_is_no_worse_than_descent((p, g, h, lambda) in instance()) {
        let sys = accumulate_ab(&p, &g, &h);
        let w = solve_weights(&sys.a, &sys.b, lambda).unwrap().w;
        let oracle = descend(&p, &g, &h, lambda, 20_000);
        let ours = explicit_objective(&p, &g, &h, lambda, &w);
        let theirs = explicit_objective(&p, &g, &h, lambda, &oracle);
        prop_assert!(ours <= theirs + 1e-6, "{ours} vs {theirs}");
    }

    #[test]
    fn hard_assignment_gives_leaf_weights(
        n in 1usize..40,
        k in 2usize..6,
        seed in any::<u64>(),
        lambda in prop::sample::select(vec![0.0, 0.5, 1.0]),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // with no ridge every leaf needs a sample
        let n = if lambda == 0.0 { n.max(k) } else { n };
        let leaf: Vec<usize> = (0..n).map(|i| if lambda == 0.0 && i < k { i } else { rng.gen_range(0..k) }).collect();
        let mut p = Matrix::zeros(n, k);
        for (i, &j) in leaf.iter().enumerate() {
            p.set(i, j, 1.0);
        }
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let sys = accumulate_ab(&p, &g, &h);
        let w = solve_weights(&sys.a, &sys.b, lambda).unwrap().w;
        for j in 0..k {
            let (sg, sh) = leaf.iter().zip(g.iter().zip(&h))
                .filter(|(&l, _)| l == j)
                .fold((0.0, 0.0), |(a, b), (_, (gi, hi))| (a + gi, b + hi));
            let expected = if sh + lambda == 0.0 { 0.0 } else { -sg / (sh + lambda) };
            prop_assert!((w[j] - expected).abs() <= 1e-12 * expected.abs().max(1.0),
                "leaf {j}: {} vs {expected}", w[j]);
        }
    }
}
