//! Per-round output scores: assemble `A = P'(H o P)`, `B = P'G` and solve
//! `(A + lambda I) W = -B`.

use crate::error::{GbunError, Result};
use crate::matrix::Matrix;

const BLOCK: usize = 64;
const JITTER_RETRIES: i32 = 4;

/// Partial or pooled system: `A` (`K x K`, symmetric) and the un-negated
/// `B = P'G`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemAB {
    pub a: Matrix,
    pub b: Vec<f64>,
}

impl SystemAB {
    pub fn zeros(k: usize) -> Self {
        Self {
            a: Matrix::zeros(k, k),
            b: vec![0.0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.b.len()
    }

    /// Layout: `A` row-major, then `B`.
    pub fn to_payload(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.a.as_slice().len() + self.b.len());
        v.extend_from_slice(self.a.as_slice());
        v.extend_from_slice(&self.b);
        v
    }

    pub fn from_payload(values: &[f64], k: usize) -> Result<Self> {
        if values.len() != k * k + k {
            return Err(GbunError::protocol(format!(
                "system payload has {} values, expected {}",
                values.len(),
                k * k + k
            )));
        }
        Ok(Self {
            a: Matrix::from_vec(k, k, values[..k * k].to_vec()),
            b: values[k * k..].to_vec(),
        })
    }

    pub fn add_assign(&mut self, other: &SystemAB) {
        for (x, y) in self.a.as_mut_slice().iter_mut().zip(other.a.as_slice()) {
            *x += y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += y;
        }
    }
}

/// Reusable scratch for [`accumulate_ab_into`].
#[derive(Default)]
pub struct AccumulateScratch {
    weighted: Vec<f64>,
}

/// `A[k][j] = sum_i h_i p_ik p_ij`, `B[j] = sum_i g_i p_ij`.
pub fn accumulate_ab(p: &Matrix, g: &[f64], h: &[f64]) -> SystemAB {
    let mut out = SystemAB::zeros(p.cols());
    accumulate_ab_into(p, g, h, &mut AccumulateScratch::default(), &mut out);
    out
}

/// As [`accumulate_ab`], overwriting `out` and reusing `scratch`.
///
/// Only the upper block triangle of `A` is multiplied; the lower one is a
/// mirror, so `A` is exactly symmetric.
pub fn accumulate_ab_into(
    p: &Matrix,
    g: &[f64],
    h: &[f64],
    scratch: &mut AccumulateScratch,
    out: &mut SystemAB,
) {
    let n = p.rows();
    let k = p.cols();
    assert_eq!(g.len(), n, "gradient length");
    assert_eq!(h.len(), n, "hessian length");
    assert_eq!(out.k(), k, "system width");

    out.b.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let gi = g[i];
        for (bj, pij) in out.b.iter_mut().zip(p.row(i)) {
            *bj += gi * pij;
        }
    }

    let a = out.a.as_mut_slice();
    a.iter_mut().for_each(|v| *v = 0.0);
    if n == 0 {
        return;
    }

    scratch.weighted.clear();
    scratch.weighted.reserve(n * k);
    for i in 0..n {
        let hi = h[i];
        scratch.weighted.extend(p.row(i).iter().map(|v| hi * v));
    }
    let weighted = &scratch.weighted;
    let pd = p.as_slice();

    let mut r0 = 0;
    while r0 < k {
        let rows = BLOCK.min(k - r0);
        let cols = k - r0;
        // A[r0.., r0..] += P[:, r0..r0+rows]' . Q[:, r0..]
        unsafe {
            matrixmultiply::dgemm(
                rows,
                n,
                cols,
                1.0,
                pd.as_ptr().add(r0),
                1,
                k as isize,
                weighted.as_ptr().add(r0),
                k as isize,
                1,
                0.0,
                a.as_mut_ptr().add(r0 * k + r0),
                k as isize,
                1,
            );
        }
        r0 += rows;
    }
    for r in 0..k {
        for c in 0..r {
            a[r * k + c] = a[c * k + r];
        }
    }
}

/// Scores from a solve, and the ridge actually used when the plain system
/// had to be regularized further.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub w: Vec<f64>,
    pub jitter: Option<f64>,
}

/// Lower-triangular Cholesky factor of `m`, or `None` when a pivot is not
/// safely positive.
fn cholesky(m: &Matrix) -> Option<Matrix> {
    let k = m.rows();
    let scale = (0..k).map(|i| m.get(i, i).abs()).fold(0.0, f64::max);
    let tol = scale * k as f64 * f64::EPSILON;
    let mut l = Matrix::zeros(k, k);
    for j in 0..k {
        let mut d = m.get(j, j);
        for t in 0..j {
            d -= l.get(j, t) * l.get(j, t);
        }
        if !d.is_finite() || d <= tol {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..k {
            let mut s = m.get(i, j);
            let (li, lj) = (l.row(i), l.row(j));
            for t in 0..j {
                s -= li[t] * lj[t];
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, rhs: &[f64]) -> Vec<f64> {
    let k = l.rows();
    let mut y = vec![0.0; k];
    for i in 0..k {
        let mut s = rhs[i];
        let li = l.row(i);
        for t in 0..i {
            s -= li[t] * y[t];
        }
        y[i] = s / li[i];
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = y[i];
        for t in i + 1..k {
            s -= l.get(t, i) * x[t];
        }
        x[i] = s / l.get(i, i);
    }
    x
}

fn ridge(a: &Matrix, lambda: f64) -> Matrix {
    let mut m = a.clone();
    for i in 0..m.rows() {
        m.set(i, i, m.get(i, i) + lambda);
    }
    m
}

fn mat_vec(m: &Matrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Solves `(A + lambda I) W = -B` by Cholesky with two steps of iterative
/// refinement.
///
/// If the factorization breaks down, the ridge is raised to
/// `max(lambda, 1e-8) * 10^k` for `k = 1..=4` and the ridge that worked is
/// reported in [`Solution::jitter`].
pub fn solve_weights(a: &Matrix, b: &[f64], lambda: f64) -> Result<Solution> {
    let k = b.len();
    if a.rows() != k || a.cols() != k {
        return Err(GbunError::Numeric(format!(
            "system matrix is {}x{}, rhs has {k} entries",
            a.rows(),
            a.cols()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(GbunError::config(format!("lambda must be >= 0, got {lambda}")));
    }
    let rhs: Vec<f64> = b.iter().map(|v| -v).collect();
    let mut ridge_used = lambda;
    let mut jittered = false;
    let mut attempt = 0;
    loop {
        let m = ridge(a, ridge_used);
        if let Some(l) = cholesky(&m) {
            let mut w = cholesky_solve(&l, &rhs);
            for _ in 0..2 {
                let mw = mat_vec(&m, &w);
                let r: Vec<f64> = rhs.iter().zip(&mw).map(|(t, v)| t - v).collect();
                let dw = cholesky_solve(&l, &r);
                w.iter_mut().zip(&dw).for_each(|(x, d)| *x += d);
            }
            if w.iter().all(|v| v.is_finite()) {
                return Ok(Solution {
                    w,
                    jitter: jittered.then_some(ridge_used),
                });
            }
        }
        attempt += 1;
        if attempt > JITTER_RETRIES {
            return Err(GbunError::Numeric(format!(
                "Cholesky failed up to ridge {ridge_used:e}"
            )));
        }
        ridge_used = lambda.max(1e-8) * 10f64.powi(attempt);
        jittered = true;
    }
}

/// Second-order objective `B.W + W'AW/2 + lambda |W|^2 / 2`.
pub fn quadratic_objective(a: &Matrix, b: &[f64], lambda: f64, w: &[f64]) -> f64 {
    let aw = mat_vec(a, w);
    let lin: f64 = b.iter().zip(w).map(|(x, y)| x * y).sum();
    let quad: f64 = w.iter().zip(&aw).map(|(x, y)| x * y).sum();
    let reg: f64 = w.iter().map(|x| x * x).sum();
    lin + 0.5 * quad + 0.5 * lambda * reg
}

/// `max_j |((A + lambda I) W + B)_j|`.
pub fn stationarity_residual(a: &Matrix, b: &[f64], lambda: f64, w: &[f64]) -> f64 {
    let aw = mat_vec(a, w);
    aw.iter()
        .zip(w)
        .zip(b)
        .map(|((aw, w), b)| (aw + lambda * w + b).abs())
        .fold(0.0, f64::max)
}
