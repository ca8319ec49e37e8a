//! CSR sample storage, libsvm text I/O, partitioning and nnz-balanced batch
//! planning.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use flate2::read::MultiGzDecoder;

use crate::error::{GbunError, Result};

/// Labelled samples in compressed sparse row layout.
///
/// Feature ids are 0-based. Within a row they are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDataset {
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    labels: Vec<f64>,
    num_features: usize,
}

impl SparseDataset {
    pub fn new(
        indptr: Vec<usize>,
        indices: Vec<u32>,
        values: Vec<f64>,
        labels: Vec<f64>,
        num_features: usize,
    ) -> Result<Self> {
        if indptr.first() != Some(&0) {
            return Err(GbunError::data("indptr must start at 0"));
        }
        if indptr.len() != labels.len() + 1 {
            return Err(GbunError::data(format!(
                "indptr has {} entries for {} labels",
                indptr.len(),
                labels.len()
            )));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(GbunError::data("indptr/indices/values lengths disagree"));
        }
        for (row, w) in indptr.windows(2).enumerate() {
            if w[0] > w[1] {
                return Err(GbunError::data(format!("indptr decreases at row {row}")));
            }
            let idx = &indices[w[0]..w[1]];
            if idx.windows(2).any(|p| p[0] >= p[1]) {
                return Err(GbunError::data(format!(
                    "row {row}: feature ids not strictly increasing"
                )));
            }
            if let Some(&last) = idx.last() {
                if last as usize >= num_features {
                    return Err(GbunError::data(format!(
                        "row {row}: feature id {last} >= num_features {num_features}"
                    )));
                }
            }
        }
        Ok(Self {
            indptr,
            indices,
            values,
            labels,
            num_features,
        })
    }

    pub fn empty(num_features: usize) -> Self {
        Self {
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
            labels: Vec::new(),
            num_features,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Feature ids and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    #[inline]
    pub fn row_nnz(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    /// Fraction of stored entries over the full `n x m` grid.
    pub fn density(&self) -> f64 {
        let cells = self.num_samples() as f64 * self.num_features as f64;
        if cells == 0.0 {
            0.0
        } else {
            self.nnz() as f64 / cells
        }
    }

    /// Returns a copy whose declared feature count is `num_features`.
    pub fn with_num_features(mut self, num_features: usize) -> Result<Self> {
        if let Some(&max) = self.indices.iter().max() {
            if max as usize >= num_features {
                return Err(GbunError::data(format!(
                    "feature id {} exceeds requested feature count {num_features}",
                    max + 1
                )));
            }
        }
        self.num_features = num_features;
        Ok(self)
    }

    /// Contiguous row slice as an independent dataset.
    pub fn slice_rows(&self, rows: Range<usize>) -> SparseDataset {
        let lo = self.indptr[rows.start];
        let hi = self.indptr[rows.end];
        SparseDataset {
            indptr: self.indptr[rows.start..=rows.end]
                .iter()
                .map(|p| p - lo)
                .collect(),
            indices: self.indices[lo..hi].to_vec(),
            values: self.values[lo..hi].to_vec(),
            labels: self.labels[rows].to_vec(),
            num_features: self.num_features,
        }
    }

    /// Gathers the given rows, in the order listed.
    pub fn select_rows(&self, rows: &[usize]) -> SparseDataset {
        let mut out = SparseDataset::empty(self.num_features);
        for &i in rows {
            let (idx, val) = self.row(i);
            out.indices.extend_from_slice(idx);
            out.values.extend_from_slice(val);
            out.indptr.push(out.indices.len());
            out.labels.push(self.labels[i]);
        }
        out
    }
}

/// Parses libsvm text (`<label> <idx>:<val> ...`, 1-based indices).
///
/// `num_features` overrides the inferred feature count (max index seen); it
/// must be at least that large.
pub fn parse_libsvm<R: BufRead>(reader: R, num_features: Option<usize>) -> Result<SparseDataset> {
    let mut indptr = vec![0usize];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut max_feature: Option<u32> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let content = match line.find('#') {
            Some(pos) => &line[..pos],
            None => &line[..],
        };
        let mut tokens = content.split_whitespace();
        let Some(label_tok) = tokens.next() else {
            continue;
        };
        let err = |msg: String| GbunError::Parse { line: lineno, msg };
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("bad label `{label_tok}`")))?;
        let row_start = indices.len();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected <index>:<value>, got `{tok}`")))?;
            let idx: u64 = idx
                .parse()
                .map_err(|_| err(format!("bad feature index `{idx}`")))?;
            if idx == 0 || idx > u32::MAX as u64 {
                return Err(err(format!("feature index {idx} out of range (1-based)")));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| err(format!("bad feature value `{val}`")))?;
            let id = (idx - 1) as u32;
            if indices.len() > row_start && *indices.last().unwrap() >= id {
                return Err(err(format!(
                    "feature index {idx} is not greater than the previous index"
                )));
            }
            indices.push(id);
            values.push(val);
            max_feature = Some(max_feature.map_or(id, |m| m.max(id)));
        }
        labels.push(label);
        indptr.push(indices.len());
    }

    let inferred = max_feature.map_or(0, |m| m as usize + 1);
    let m = match num_features {
        Some(m) if m < inferred => {
            return Err(GbunError::data(format!(
                "data uses {inferred} features but the override is {m}"
            )))
        }
        Some(m) => m,
        None => inferred,
    };
    Ok(SparseDataset {
        indptr,
        indices,
        values,
        labels,
        num_features: m,
    })
}

/// Reads a libsvm file, transparently gunzipping it when it starts with the
/// gzip magic bytes.
pub fn read_libsvm_file(path: impl AsRef<Path>, num_features: Option<usize>) -> Result<SparseDataset> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| GbunError::data(format!("cannot open {}: {e}", path.display())))?;
    let mut reader = BufReader::new(file);
    let gz = {
        let head = reader.fill_buf()?;
        head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b
    };
    if gz {
        let inner: Box<dyn Read> = Box::new(MultiGzDecoder::new(reader));
        parse_libsvm(BufReader::new(inner), num_features)
    } else {
        parse_libsvm(reader, num_features)
    }
}

/// Writes `ds` as libsvm text with 1-based indices. Reals use the shortest
/// representation that parses back to the same value.
pub fn write_libsvm<W: Write>(ds: &SparseDataset, mut out: W) -> Result<()> {
    for i in 0..ds.num_samples() {
        write!(out, "{}", ds.labels[i])?;
        let (idx, val) = ds.row(i);
        for (f, v) in idx.iter().zip(val) {
            write!(out, " {}:{}", f + 1, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionStrategy {
    #[default]
    Contiguous,
    RoundRobin,
}

impl FromStr for PartitionStrategy {
    type Err = GbunError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contiguous" => Ok(Self::Contiguous),
            "round_robin" | "round-robin" => Ok(Self::RoundRobin),
            other => Err(GbunError::config(format!(
                "unknown partition strategy `{other}` (contiguous, round_robin)"
            ))),
        }
    }
}

impl fmt::Display for PartitionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Contiguous => "contiguous",
            Self::RoundRobin => "round_robin",
        })
    }
}

/// Row ids assigned to each of `parts` partitions.
pub fn partition_rows(n: usize, parts: usize, strategy: PartitionStrategy) -> Result<Vec<Vec<usize>>> {
    if parts == 0 {
        return Err(GbunError::config("partition count must be at least 1"));
    }
    if parts > n {
        return Err(GbunError::config(format!(
            "cannot split {n} samples into {parts} partitions"
        )));
    }
    Ok(match strategy {
        PartitionStrategy::Contiguous => {
            let base = n / parts;
            let extra = n % parts;
            let mut start = 0;
            (0..parts)
                .map(|s| {
                    let len = base + usize::from(s < extra);
                    let rows = (start..start + len).collect();
                    start += len;
                    rows
                })
                .collect()
        }
        PartitionStrategy::RoundRobin => (0..parts)
            .map(|s| (s..n).step_by(parts).collect())
            .collect(),
    })
}

/// Splits `ds` into `parts` datasets sharing its feature count.
pub fn partition(ds: &SparseDataset, parts: usize, strategy: PartitionStrategy) -> Result<Vec<SparseDataset>> {
    let rows = partition_rows(ds.num_samples(), parts, strategy)?;
    Ok(rows
        .into_iter()
        .map(|r| match strategy {
            PartitionStrategy::Contiguous if !r.is_empty() => {
                ds.slice_rows(r[0]..r[r.len() - 1] + 1)
            }
            _ => ds.select_rows(&r),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub row_ranges: Vec<Range<usize>>,
    pub nnz_budget: usize,
    pub max_rows_per_batch: usize,
}

impl BatchPlan {
    pub fn num_batches(&self) -> usize {
        self.row_ranges.len()
    }
}

/// Packs consecutive rows into batches of roughly equal nnz.
///
/// The budget is `max(row_nnz_max, ceil(nnz / num_batches))` and the row cap
/// is `n / q25(row nnz)`. A batch always takes at least one row, so a row
/// larger than the budget still gets its own batch.
pub fn plan_batches(ds: &SparseDataset, num_batches: usize) -> BatchPlan {
    let n = ds.num_samples();
    let num_batches = num_batches.max(1);
    if n == 0 {
        return BatchPlan {
            row_ranges: Vec::new(),
            nnz_budget: 0,
            max_rows_per_batch: 0,
        };
    }
    if num_batches == 1 {
        return BatchPlan {
            row_ranges: vec![0..n],
            nnz_budget: ds.nnz(),
            max_rows_per_batch: n,
        };
    }
    let mut row_nnz: Vec<usize> = (0..n).map(|i| ds.row_nnz(i)).collect();
    let row_nnz_max = row_nnz.iter().copied().max().unwrap_or(0);
    let nnz_budget = row_nnz_max.max(ds.nnz().div_ceil(num_batches));

    // nearest-rank 25th percentile
    let ordered = {
        row_nnz.sort_unstable();
        row_nnz
    };
    let rank = (n as f64 * 0.25).ceil().max(1.0) as usize;
    let q25 = ordered[rank - 1].max(1);
    let max_rows_per_batch = (n / q25).max(1);

    let mut row_ranges = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        let mut nnz = ds.row_nnz(start);
        while end < n && end - start < max_rows_per_batch && nnz + ds.row_nnz(end) <= nnz_budget {
            nnz += ds.row_nnz(end);
            end += 1;
        }
        row_ranges.push(start..end);
        start = end;
    }
    BatchPlan {
        row_ranges,
        nnz_budget,
        max_rows_per_batch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<SparseDataset> {
        parse_libsvm(s.as_bytes(), None)
    }

    /// Rows with the given nnz counts, features 0..nnz.
    fn with_row_nnz(counts: &[usize]) -> SparseDataset {
        let mut text = String::new();
        for &c in counts {
            text.push('1');
            for f in 1..=c {
                text.push_str(&format!(" {f}:1"));
            }
            text.push('\n');
        }
        parse(&text).unwrap()
    }

    #[test]
    fn parses_basic_text() {
        let ds = parse("1 3:0.5 7:1.0\n0 1:2.0").unwrap();
        assert_eq!(ds.num_samples(), 2);
        assert_eq!(ds.nnz(), 3);
        assert_eq!(ds.labels(), &[1.0, 0.0]);
        assert_eq!(ds.row(0).0, &[2, 6]);
        assert_eq!(ds.row(0).1, &[0.5, 1.0]);
        assert_eq!(ds.num_features(), 7);
    }

    #[test]
    fn empty_input() {
        let ds = parse("").unwrap();
        assert_eq!((ds.num_samples(), ds.nnz(), ds.num_features()), (0, 0, 0));
        let ds = parse_libsvm("".as_bytes(), Some(12)).unwrap();
        assert_eq!(ds.num_features(), 12);
    }

    #[test]
    fn rejects_repeated_index() {
        match parse("1 2:1 2:1") {
            Err(GbunError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reports_line_of_bad_token() {
        match parse("1 1:1\n\n0 4:x") {
            Err(GbunError::Parse { line: 3, msg }) => assert!(msg.contains("4:x") || msg.contains("`x`")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("1 0:1"), Err(GbunError::Parse { .. })));
        assert!(matches!(parse("abc 1:1"), Err(GbunError::Parse { .. })));
        assert!(matches!(parse("1 5"), Err(GbunError::Parse { .. })));
    }

    #[test]
    fn override_smaller_than_data_is_an_error() {
        assert!(parse_libsvm("1 9:1".as_bytes(), Some(4)).is_err());
        let ds = parse_libsvm("1 9:1".as_bytes(), Some(20)).unwrap();
        assert_eq!(ds.num_features(), 20);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let ds = parse("# header\n1 1:1 # trailing\n\n0 2:3\n").unwrap();
        assert_eq!(ds.num_samples(), 2);
    }

    #[test]
    fn reads_gzip_transparently() {
        use flate2::{write::GzEncoder, Compression};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.svm.gz");
        let mut enc = GzEncoder::new(File::create(&path).unwrap(), Compression::default());
        enc.write_all(b"1 3:0.5 7:1.0\n0 1:2.0\n").unwrap();
        enc.finish().unwrap();
        let ds = read_libsvm_file(&path, None).unwrap();
        assert_eq!(ds, parse("1 3:0.5 7:1.0\n0 1:2.0").unwrap());
    }

    #[test]
    fn contiguous_partition() {
        let ds = with_row_nnz(&[1, 2, 3, 4]);
        let parts = partition(&ds, 2, PartitionStrategy::Contiguous).unwrap();
        assert_eq!(parts[0], ds.select_rows(&[0, 1]));
        assert_eq!(parts[1], ds.select_rows(&[2, 3]));
        let one = partition(&ds, 1, PartitionStrategy::Contiguous).unwrap();
        assert_eq!(one, vec![ds]);
    }

    #[test]
    fn round_robin_partition() {
        assert_eq!(
            partition_rows(5, 2, PartitionStrategy::RoundRobin).unwrap(),
            vec![vec![0, 2, 4], vec![1, 3]]
        );
    }

    #[test]
    fn partition_count_bounds() {
        let ds = with_row_nnz(&[1, 1]);
        assert!(partition(&ds, 0, PartitionStrategy::Contiguous).is_err());
        assert!(partition(&ds, 3, PartitionStrategy::RoundRobin).is_err());
    }

    #[test]
    fn batches_even_rows() {
        let plan = plan_batches(&with_row_nnz(&[2, 2, 2, 2]), 2);
        assert_eq!(plan.nnz_budget, 4);
        assert_eq!(plan.row_ranges, vec![0..2, 2..4]);
    }

    #[test]
    fn batches_heavy_first_row() {
        let plan = plan_batches(&with_row_nnz(&[10, 1, 1]), 3);
        assert_eq!(plan.nnz_budget, 10);
        assert_eq!(plan.max_rows_per_batch, 3);
        assert_eq!(plan.row_ranges, vec![0..1, 1..3]);
    }

    #[test]
    fn single_batch_covers_everything() {
        let plan = plan_batches(&with_row_nnz(&[3, 0, 5, 1]), 1);
        assert_eq!(plan.row_ranges, vec![0..4]);
    }

    #[test]
    fn empty_rows_fall_back_to_unit_quantile() {
        let plan = plan_batches(&with_row_nnz(&[0, 0, 0, 4]), 2);
        assert_eq!(plan.max_rows_per_batch, 4);
        let covered: usize = plan.row_ranges.iter().map(|r| r.len()).sum();
        assert_eq!(covered, 4);
    }

    fn arb_dataset() -> impl Strategy<Value = SparseDataset> {
        prop::collection::vec(
            (
                -5i32..5,
                prop::collection::btree_map(0u32..40, -1.0e3f64..1.0e3, 0..8),
            ),
            0..30,
        )
        .prop_map(|rows| {
            let mut ds = SparseDataset::empty(40);
            for (label, feats) in rows {
                for (f, v) in feats {
                    ds.indices.push(f);
                    ds.values.push(v);
                }
                ds.indptr.push(ds.indices.len());
                ds.labels.push(label as f64);
            }
            ds
        })
    }

    proptest! {
        #[test]
        fn libsvm_round_trip(ds in arb_dataset()) {
            let mut buf = Vec::new();
            write_libsvm(&ds, &mut buf).unwrap();
            let back = parse_libsvm(&buf[..], Some(ds.num_features())).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn partitions_conserve_rows(ds in arb_dataset(), parts in 1usize..6, rr in any::<bool>()) {
            prop_assume!(parts <= ds.num_samples());
            let strategy = if rr { PartitionStrategy::RoundRobin } else { PartitionStrategy::Contiguous };
            let split = partition(&ds, parts, strategy).unwrap();
            prop_assert_eq!(split.iter().map(|p| p.nnz()).sum::<usize>(), ds.nnz());
            let mut got: Vec<i64> = split.iter().flat_map(|p| p.labels().iter().map(|&l| l as i64)).collect();
            let mut want: Vec<i64> = ds.labels().iter().map(|&l| l as i64).collect();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
            for p in &split {
                prop_assert_eq!(p.num_features(), ds.num_features());
            }
        }

        #[test]
        fn batch_plan_covers_rows(ds in arb_dataset(), batches in 1usize..10) {
            let plan = plan_batches(&ds, batches);
            let mut next = 0;
            let mut nnz = 0;
            for r in &plan.row_ranges {
                prop_assert_eq!(r.start, next);
                prop_assert!(r.end > r.start);
                let batch_nnz = ds.indptr()[r.end] - ds.indptr()[r.start];
                prop_assert!(batch_nnz <= plan.nnz_budget || r.len() == 1);
                nnz += batch_nnz;
                next = r.end;
            }
            prop_assert_eq!(next, ds.num_samples());
            prop_assert_eq!(nnz, ds.nnz());
        }
    }
}
