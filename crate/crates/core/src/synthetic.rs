//! Seeded synthetic data sets for tests, benchmarks and demos.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::SparseDataset;

/// Linearly separable binary data: each row has `nnz_per_row` distinct
/// features with values in `[-1, 1)`, labelled by the sign of its product
/// with a hidden random hyperplane.
pub fn separable_binary(n: usize, m: usize, nnz_per_row: usize, seed: u64) -> SparseDataset {
    assert!(nnz_per_row >= 1 && nnz_per_row <= m, "need 1 <= nnz_per_row <= m");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    indptr.push(0);
    let mut indices = Vec::with_capacity(n * nnz_per_row);
    let mut values = Vec::with_capacity(n * nnz_per_row);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut cols = sample(&mut rng, m, nnz_per_row).into_vec();
        cols.sort_unstable();
        let mut dot = 0.0;
        for c in cols {
            let v: f64 = rng.gen_range(-1.0..1.0);
            dot += v * plane[c];
            indices.push(c as u32);
            values.push(v);
        }
        indptr.push(indices.len());
        labels.push(f64::from(u8::from(dot > 0.0)));
    }
    SparseDataset::new(indptr, indices, values, labels, m).expect("generated data is valid CSR")
}

/// Gaussian blobs, one per class, in `m` dense dimensions.
pub fn blobs(n: usize, m: usize, classes: usize, spread: f64, seed: u64) -> SparseDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut indptr = vec![0];
    let mut indices = Vec::with_capacity(n * m);
    let mut values = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for (j, mu) in centers[c].iter().enumerate() {
            // sum of uniforms: cheap, roughly normal noise
            let noise: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() * 0.5;
            indices.push(j as u32);
            values.push(mu + spread * noise);
        }
        indptr.push(indices.len());
        labels.push(c as f64);
    }
    SparseDataset::new(indptr, indices, values, labels, m).expect("generated data is valid CSR")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_is_seeded_and_balanced_enough() {
        let a = separable_binary(500, 50, 5, 9);
        assert_eq!(a, separable_binary(500, 50, 5, 9));
        assert_ne!(a, separable_binary(500, 50, 5, 10));
        assert_eq!(a.nnz(), 2500);
        let pos = a.labels().iter().filter(|&&y| y == 1.0).count();
        assert!((150..350).contains(&pos), "{pos}");
    }

    #[test]
    fn blobs_cycle_through_classes() {
        let b = blobs(10, 3, 4, 0.1, 1);
        assert_eq!(b.labels()[..5], [0.0, 1.0, 2.0, 3.0, 0.0]);
        assert_eq!(b.nnz(), 30);
    }
}
