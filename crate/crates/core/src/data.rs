//! Datasets, synthetic generators and client partitioners.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(idx.len(), self.cols, data)
    }

    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Matrix::new(self.rows, cols.len(), data)
    }

    /// Horizontal concatenation of blocks with equal row counts.
    pub fn hconcat(blocks: &[Matrix]) -> Matrix {
        let rows = blocks.first().map_or(0, |b| b.rows);
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(r));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Splits columns into consecutive blocks of the given widths.
    pub fn hsplit(&self, widths: &[usize]) -> Vec<Matrix> {
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let cols: Vec<usize> = (start..start + w).collect();
                start += w;
                self.select_cols(&cols)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    /// Class index (as f64) for classification, target value for regression.
    pub labels: Vec<f64>,
    pub class_count: Option<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>, class_count: Option<usize>) -> Result<Self, DataError> {
        if features.rows != labels.len() {
            return Err(DataError::Invalid(format!("{} feature rows but {} labels", features.rows, labels.len())));
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite feature value".into()));
        }
        if let Some(k) = class_count {
            if labels.iter().any(|&y| y < 0.0 || y.fract() != 0.0 || y as usize >= k) {
                return Err(DataError::Invalid(format!("class label outside [0, {k})")));
            }
        }
        Ok(Self { features, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Shuffles and splits into `(train, validation)` with `train_frac` of the rows in train.
    pub fn split(&self, train_frac: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_frac).round() as usize;
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }

    /// Per-column mean and standard deviation (population).
    pub fn column_stats(&self) -> Vec<(f64, f64)> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|c| {
                let mean = (0..self.len()).map(|r| self.features.row(r)[c]).sum::<f64>() / n;
                let var = (0..self.len()).map(|r| (self.features.row(r)[c] - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Applies `(x - mean) / std` per column; zero-variance columns are only centered.
    pub fn standardized(&self, stats: &[(f64, f64)]) -> Dataset {
        let mut out = self.clone();
        for r in 0..out.len() {
            for (v, &(m, s)) in out.features.row_mut(r).iter_mut().zip(stats) {
                *v = if s > 0.0 { (*v - m) / s } else { *v - m };
            }
        }
        out
    }
}

/// Gaussian clusters, one center per class, laid out class by class.
pub fn make_blobs(classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if classes < 2 || dim < 1 || per_class < 1 {
        return Err(DataError::Invalid(format!(
            "make_blobs needs classes >= 2, dim >= 1, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|&m| m + spread * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c as f64);
        }
    }
    Dataset::new(Matrix::new(classes * per_class, dim, data), labels, Some(classes))
}

/// Loads a CSV with a header row whose last column is the label.
pub fn load_csv(path: impl AsRef<Path>, class_count: Option<usize>) -> Result<Dataset, DataError> {
    read_csv(std::fs::File::open(path).map_err(|e| DataError::Invalid(e.to_string()))?, class_count)
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(source: R, class_count: Option<usize>) -> Result<Dataset, DataError> {
    let mut reader = csv::Reader::from_reader(source);
    let cols = reader.headers()?.len();
    if cols < 2 {
        return Err(DataError::Invalid("csv needs at least one feature and a label column".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut values = Vec::with_capacity(cols);
        for field in record.iter() {
            values.push(
                field.trim().parse::<f64>().map_err(|e| DataError::Invalid(format!("bad number `{field}`: {e}")))?,
            );
        }
        labels.push(values.pop().expect("cols >= 2"));
        data.extend(values);
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("csv has no data rows".into()));
    }
    let rows = labels.len();
    Dataset::new(Matrix::new(rows, cols - 1, data), labels, class_count)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    ClassRestricted { min_classes: usize, max_classes: usize },
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub scheme: PartitionScheme,
    pub n_clients: usize,
    pub seed: u64,
}

/// Splits `len` items into `parts` contiguous runs whose sizes differ by at most one.
fn even_split<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        out.push(items[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Disjoint per-client index sets covering every sample exactly once.
pub fn partition_indices(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>, DataError> {
    let n_clients = spec.n_clients;
    if n_clients == 0 {
        return Err(DataError::InfeasiblePartition("n_clients must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.scheme {
        PartitionScheme::Iid => {
            let mut idx: Vec<usize> = (0..ds.len()).collect();
            idx.shuffle(&mut rng);
            Ok(even_split(&idx, n_clients))
        }
        PartitionScheme::ClassRestricted { min_classes, max_classes } => {
            let classes = ds.class_count.ok_or_else(|| {
                DataError::InfeasiblePartition("class_restricted needs labeled classification data".into())
            })?;
            if *min_classes < 1 || min_classes > max_classes || *max_classes > classes {
                return Err(DataError::InfeasiblePartition(format!(
                    "class range [{min_classes}, {max_classes}] invalid for {classes} classes"
                )));
            }
            // Client i always owns class i mod C, the rest of its label set is random.
            let mut owners: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for client in 0..n_clients {
                let k = rng.random_range(*min_classes..=*max_classes);
                let anchor = client % classes;
                let mut others: Vec<usize> = (0..classes).filter(|&c| c != anchor).collect();
                others.shuffle(&mut rng);
                owners[anchor].push(client);
                for &c in others.iter().take(k - 1) {
                    owners[c].push(client);
                }
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for i in 0..ds.len() {
                by_class[ds.class_of(i)].push(i);
            }
            let mut parts = vec![Vec::new(); n_clients];
            for (c, members) in by_class.iter_mut().enumerate() {
                if members.is_empty() {
                    continue;
                }
                if owners[c].is_empty() {
                    return Err(DataError::InfeasiblePartition(format!("no client owns class {c}")));
                }
                owners[c].sort_unstable();
                members.shuffle(&mut rng);
                for (owner, chunk) in owners[c].iter().zip(even_split(members, owners[c].len())) {
                    parts[*owner].extend(chunk);
                }
            }
            Ok(parts)
        }
        PartitionScheme::Dirichlet { alpha } => {
            let classes = ds
                .class_count
                .ok_or_else(|| DataError::InfeasiblePartition("dirichlet needs labeled classification data".into()))?;
            let gamma =
                Gamma::new(*alpha, 1.0).map_err(|e| DataError::InfeasiblePartition(format!("alpha {alpha}: {e}")))?;
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
            for i in 0..ds.len() {
                by_class[ds.class_of(i)].push(i);
            }
            let mut parts = vec![Vec::new(); n_clients];
            for members in by_class.iter_mut() {
                members.shuffle(&mut rng);
                let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let m = members.len() as f64;
                let mut cum = 0.0;
                let mut start = 0;
                for (client, d) in draws.iter().enumerate() {
                    cum += d / total;
                    let end = if client + 1 == n_clients {
                        members.len()
                    } else {
                        ((cum * m).round() as usize).clamp(start, members.len())
                    };
                    parts[client].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            Ok(parts)
        }
    }
}

pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    Ok(partition_indices(ds, spec)?.iter().map(|idx| ds.subset(idx)).collect())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;

    #[test]
    fn zero_spread_blobs_repeat_centers() {
        let ds = make_blobs(2, 2, 10, 0.0, 3).unwrap();
        assert_eq!(ds.len(), 20);
        for c in 0..2 {
            let first = ds.features.row(c * 10).to_vec();
            for i in 0..10 {
                assert_eq!(ds.features.row(c * 10 + i), first.as_slice());
            }
        }
        assert_ne!(ds.features.row(0), ds.features.row(10));
    }

    #[test]
    fn blobs_are_seeded() {
        assert_eq!(make_blobs(3, 4, 5, 0.3, 11).unwrap(), make_blobs(3, 4, 5, 0.3, 11).unwrap());
        assert_ne!(make_blobs(3, 4, 5, 0.3, 11).unwrap(), make_blobs(3, 4, 5, 0.3, 12).unwrap());
        assert!(make_blobs(1, 4, 5, 0.3, 11).is_err());
    }

    #[test]
    fn iid_split_sizes() {
        let ds = make_blobs(2, 1, 5, 1.0, 0).unwrap();
        let spec = PartitionSpec { scheme: PartitionScheme::Iid, n_clients: 2, seed: 1 };
        let parts = partition_indices(&ds, &spec).unwrap();
        assert_eq!(parts[0].len(), 5);
        assert_eq!(parts[1].len(), 5);
        let all: BTreeSet<usize> = parts.iter().flatten().copied().collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn class_restricted_label_counts() {
        let ds = make_blobs(10, 2, 50, 1.0, 0).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::ClassRestricted { min_classes: 5, max_classes: 7 },
            n_clients: 10,
            seed: 4,
        };
        let parts = partition(&ds, &spec).unwrap();
        assert_eq!(parts.iter().map(Dataset::len).sum::<usize>(), ds.len());
        for p in &parts {
            let labels: BTreeSet<usize> = p.labels.iter().map(|&y| y as usize).collect();
            assert!((5..=7).contains(&labels.len()), "{} classes", labels.len());
        }
    }

    #[test]
    fn class_restricted_infeasible_when_a_class_is_orphaned() {
        let ds = make_blobs(10, 2, 5, 1.0, 0).unwrap();
        let spec = PartitionSpec {
            scheme: PartitionScheme::ClassRestricted { min_classes: 1, max_classes: 1 },
            n_clients: 3,
            seed: 0,
        };
        assert!(matches!(partition(&ds, &spec), Err(DataError::InfeasiblePartition(_))));
    }

    #[test]
    fn dirichlet_large_alpha_matches_global_proportions() {
        let ds = make_blobs(4, 1, 1000, 1.0, 2).unwrap();
        let spec = PartitionSpec { scheme: PartitionScheme::Dirichlet { alpha: 1e6 }, n_clients: 4, seed: 9 };
        let parts = partition(&ds, &spec).unwrap();
        for p in &parts {
            for c in 0..4 {
                let share = p.labels.iter().filter(|&&y| y as usize == c).count() as f64 / p.len() as f64;
                assert!((share - 0.25).abs() < 0.01, "class {c} share {share}");
            }
        }
    }

    #[test]
    fn concat_and_split_invert() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let blocks = m.hsplit(&[1, 2]);
        assert_eq!(blocks[1].data, vec![2.0, 3.0, 5.0, 6.0]);
        assert_eq!(Matrix::hconcat(&blocks), m);
    }
}
