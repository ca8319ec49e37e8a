//! Forward pass of a round's untrained network: raw projection `Z`,
//! per-neuron standardization, and row softmax into the soft assignment `P`.

use serde::{Deserialize, Serialize};

use crate::dataset::{plan_batches, BatchPlan, SparseDataset};
use crate::error::{GbunError, Result};
use crate::hashwgen::WeightGenerator;
use crate::matrix::Matrix;

/// Lower bound applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-12;

/// One round's network: the generator plus round index and output width.
#[derive(Clone, Copy)]
pub struct UntrainedNet<'g> {
    pub round: u32,
    pub k: usize,
    pub generator: &'g dyn WeightGenerator,
}

/// Distinct feature ids of a dataset and, for each stored entry, the position
/// of its feature in that list. Lets a round's weights be generated once per
/// feature rather than once per entry.
#[derive(Debug, Clone)]
pub struct ColumnIndex {
    features: Vec<u32>,
    slots: Vec<u32>,
}

impl ColumnIndex {
    pub fn new(ds: &SparseDataset) -> Self {
        let mut features = ds.indices().to_vec();
        features.sort_unstable();
        features.dedup();
        let slots = ds
            .indices()
            .iter()
            .map(|f| features.binary_search(f).unwrap() as u32)
            .collect();
        Self { features, slots }
    }

    pub fn features(&self) -> &[u32] {
        &self.features
    }
}

fn project_rows(
    ds: &SparseDataset,
    slots: &[u32],
    table: &[f64],
    k: usize,
    rows: std::ops::Range<usize>,
    out: &mut Matrix,
) {
    let indptr = ds.indptr();
    let values = ds.values();
    for (local, i) in rows.enumerate() {
        let z = out.row_mut(local);
        for e in indptr[i]..indptr[i + 1] {
            let x = values[e];
            let s = slots[e] as usize;
            let w = &table[s * k..(s + 1) * k];
            for (zj, wj) in z.iter_mut().zip(w) {
                *zj += x * wj;
            }
        }
    }
}

/// `Z = X . W_t` for every row of `ds`.
///
/// Each distinct feature's `K` weights are generated once, then every row
/// accumulates its entries in stored order.
pub fn forward_raw(ds: &SparseDataset, net: UntrainedNet<'_>) -> Result<Matrix> {
    let columns = ColumnIndex::new(ds);
    let table = net.generator.weights_for(net.round, &columns.features, net.k)?;
    let mut z = Matrix::zeros(ds.num_samples(), net.k);
    project_rows(ds, &columns.slots, &table, net.k, 0..ds.num_samples(), &mut z);
    Ok(z)
}

/// Forwards one dataset round after round, batch by batch, reusing its column
/// index. Counts full passes so callers can check that a round forwards the
/// data exactly once.
pub struct Forwarder<'d> {
    ds: &'d SparseDataset,
    columns: ColumnIndex,
    plan: BatchPlan,
    passes: usize,
}

impl<'d> Forwarder<'d> {
    pub fn new(ds: &'d SparseDataset, num_batches: usize) -> Self {
        Self {
            ds,
            columns: ColumnIndex::new(ds),
            plan: plan_batches(ds, num_batches),
            passes: 0,
        }
    }

    pub fn dataset(&self) -> &SparseDataset {
        self.ds
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn forward(&mut self, net: UntrainedNet<'_>) -> Result<Matrix> {
        self.passes += 1;
        let k = net.k;
        let table = net
            .generator
            .weights_for(net.round, &self.columns.features, k)?;
        let mut z = Matrix::zeros(0, k);
        for range in &self.plan.row_ranges {
            let mut batch = Matrix::zeros(range.len(), k);
            project_rows(self.ds, &self.columns.slots, &table, k, range.clone(), &mut batch);
            z.extend_rows(&batch);
        }
        Ok(z)
    }
}

/// Per-neuron sums `a_j = sum z_ij`, `b_j = sum z_ij^2` and row count `n`.
/// These add across partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSums {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub n: f64,
}

impl NormSums {
    pub fn of(z: &Matrix) -> Self {
        let k = z.cols();
        let mut a = vec![0.0; k];
        let mut b = vec![0.0; k];
        for i in 0..z.rows() {
            for (j, &v) in z.row(i).iter().enumerate() {
                a[j] += v;
                b[j] += v * v;
            }
        }
        Self {
            a,
            b,
            n: z.rows() as f64,
        }
    }

    /// Layout `a[0..K] ++ b[0..K] ++ [n]`.
    pub fn to_payload(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.a.len() + 1);
        v.extend_from_slice(&self.a);
        v.extend_from_slice(&self.b);
        v.push(self.n);
        v
    }

    pub fn from_payload(values: &[f64], k: usize) -> Result<Self> {
        if values.len() != 2 * k + 1 {
            return Err(GbunError::protocol(format!(
                "normalization payload has {} values, expected {}",
                values.len(),
                2 * k + 1
            )));
        }
        Ok(Self {
            a: values[..k].to_vec(),
            b: values[k..2 * k].to_vec(),
            n: values[2 * k],
        })
    }
}

/// Per-neuron standardization fitted on training outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

impl NormStats {
    /// Mean and unbiased sample deviation from pooled sums, with the
    /// deviation floored at [`STD_FLOOR`].
    pub fn from_sums(sums: &NormSums) -> Result<Self> {
        if sums.n < 2.0 {
            return Err(GbunError::Numeric(format!(
                "normalization needs at least 2 samples, got {}",
                sums.n
            )));
        }
        let n = sums.n;
        let mean: Vec<f64> = sums.a.iter().map(|a| a / n).collect();
        let std = sums
            .b
            .iter()
            .zip(&mean)
            .map(|(b, mu)| {
                let var = (b - n * mu * mu) / (n - 1.0);
                var.max(STD_FLOOR * STD_FLOOR).sqrt()
            })
            .collect();
        Ok(Self {
            mean,
            std,
            count: n as u64,
        })
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_norm(z: &Matrix) -> Result<NormStats> {
    NormStats::from_sums(&NormSums::of(z))
}

/// `z_ij <- (z_ij - mean_j) / std_j`, in place.
pub fn apply_norm_in_place(z: &mut Matrix, stats: &NormStats) {
    assert_eq!(z.cols(), stats.k(), "normalization width");
    for i in 0..z.rows() {
        for ((v, mu), sd) in z.row_mut(i).iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - mu) / sd;
        }
    }
}

pub fn apply_norm(z: &Matrix, stats: &NormStats) -> Matrix {
    let mut out = z.clone();
    apply_norm_in_place(&mut out, stats);
    out
}

/// Row softmax with max shift, in place.
pub fn softmax_rows_in_place(z: &mut Matrix) -> Result<()> {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(GbunError::Numeric(format!("non-finite network output in row {i}")));
        }
        softmax_slice(row);
    }
    Ok(())
}

/// Softmax of one row, in place. Input must be finite.
#[inline]
pub fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn softmax_rows(z: &Matrix) -> Result<Matrix> {
    let mut p = z.clone();
    softmax_rows_in_place(&mut p)?;
    Ok(p)
}

/// Full chain `x -> Z -> normalized -> P` with given statistics.
pub fn assignments(z: Matrix, stats: &NormStats) -> Result<Matrix> {
    let mut z = z;
    apply_norm_in_place(&mut z, stats);
    softmax_rows_in_place(&mut z)?;
    Ok(z)
}
