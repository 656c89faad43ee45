//! Datasets: synthetic Gaussian blobs, CSV ingestion, holdout splits and
//! non-IID client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::model::Batch;
use crate::rng::{stream, Role};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: line {line}: {message}")]
    Malformed { path: String, line: u64, message: String },
    #[error("{path}: label column {column} not found")]
    MissingLabelColumn { path: String, column: String },
    #[error("empty dataset")]
    Empty,
    #[error("dataset has {samples} samples, fewer than {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.rows() != labels.len() {
            return Err(DataError::InvalidParameter(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::InvalidParameter(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch::new(self.features.select_rows(indices), labels, self.num_classes).expect("rows and labels validated at construction")
    }

    pub fn class_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }

    /// Per-column mean and standard deviation (population form).
    pub fn column_stats(&self) -> Vec<(f64, f64)> {
        let n = self.len() as f64;
        (0..self.dim())
            .map(|c| {
                let mean = (0..self.len()).map(|r| self.features.get(r, c)).sum::<f64>() / n;
                let var = (0..self.len()).map(|r| (self.features.get(r, c) - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            })
            .collect()
    }

    /// Applies `(x - mean) / std` per column; constant columns are only centred.
    pub fn apply_standardization(&mut self, stats: &[(f64, f64)]) {
        for r in 0..self.len() {
            for (v, &(mean, std)) in self.features.row_mut(r).iter_mut().zip(stats) {
                *v = if std > 0.0 { (*v - mean) / std } else { *v - mean };
            }
        }
    }

    /// Standardizes in place with this dataset's own statistics and returns them.
    pub fn standardize(&mut self) -> Vec<(f64, f64)> {
        let stats = self.column_stats();
        self.apply_standardization(&stats);
        stats
    }
}

/// Gaussian clusters: class means are standard normal vectors, samples add
/// isotropic noise with standard deviation `spread`. Rows are class-major.
pub fn make_blobs(num_classes: usize, dim: usize, samples_per_class: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if num_classes == 0 || dim == 0 || samples_per_class == 0 {
        return Err(DataError::InvalidParameter("classes, dimension and samples per class must be positive".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidParameter(format!("spread must be non-negative, got {spread}")));
    }
    let mut rng = stream(seed, Role::Data, 0, 0);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut data = Vec::with_capacity(num_classes * samples_per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            data.extend(mean.iter().map(|m| m + spread * rng.sample::<f64, _>(StandardNormal)));
            labels.push(class);
        }
    }
    let features = Matrix::from_vec(labels.len(), dim, data).expect("sized above");
    Dataset::new(features, labels, num_classes)
}

/// Shuffled split into `(train, holdout)`; at least one row lands on each side.
pub fn split_holdout(dataset: &Dataset, holdout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(DataError::InvalidParameter(format!("holdout fraction must lie in (0, 1), got {holdout_fraction}")));
    }
    if dataset.len() < 2 {
        return Err(DataError::TooFewSamples { samples: dataset.len(), clients: 2 });
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut stream(seed, Role::Holdout, 0, 0));
    let n_test = ((dataset.len() as f64 * holdout_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let (test, train) = order.split_at(n_test);
    Ok((dataset.subset(train), dataset.subset(test)))
}

/// How training rows are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Heterogeneity {
    Iid,
    Dirichlet(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub heterogeneity: Heterogeneity,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }
}

/// Splits `dataset` over `clients`. Under `Dirichlet(alpha)` each class is
/// divided according to proportions drawn from `Dirichlet(alpha, .., alpha)`;
/// `Iid` deals a shuffled order round-robin. Empty clients are repaired by
/// taking one row from the currently largest client.
pub fn partition(dataset: &Dataset, clients: usize, heterogeneity: Heterogeneity, seed: u64) -> Result<PartitionPlan, DataError> {
    if clients == 0 {
        return Err(DataError::InvalidParameter("at least one client is required".into()));
    }
    if dataset.len() < clients {
        return Err(DataError::TooFewSamples { samples: dataset.len(), clients });
    }
    let mut rng = stream(seed, Role::Partition, 0, 0);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); clients];
    match heterogeneity {
        Heterogeneity::Iid => {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            for (k, i) in order.into_iter().enumerate() {
                parts[k % clients].push(i);
            }
        }
        Heterogeneity::Dirichlet(alpha) => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(DataError::InvalidParameter(format!("dirichlet alpha must be positive, got {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| DataError::InvalidParameter(e.to_string()))?;
            for class in 0..dataset.num_classes {
                let mut rows: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
                if rows.is_empty() {
                    continue;
                }
                rows.shuffle(&mut rng);
                let mut props: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = props.iter().sum();
                if total > 0.0 && total.is_finite() {
                    props.iter_mut().for_each(|p| *p /= total);
                } else {
                    // every gamma draw underflowed: all mass on one client
                    props = vec![0.0; clients];
                    props[rng.random_range(0..clients)] = 1.0;
                }
                let n = rows.len();
                let mut start = 0;
                let mut cumulative = 0.0;
                for (m, p) in props.iter().enumerate() {
                    cumulative += p;
                    let end = if m + 1 == clients { n } else { ((cumulative * n as f64).round() as usize).clamp(start, n) };
                    parts[m].extend_from_slice(&rows[start..end]);
                    start = end;
                }
            }
        }
    }
    while let Some(empty) = parts.iter().position(Vec::is_empty) {
        let largest = (0..clients).max_by_key(|&m| (parts[m].len(), std::cmp::Reverse(m))).expect("clients > 0");
        let moved = parts[largest].pop().expect("largest client is non-empty");
        parts[empty].push(moved);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(PartitionPlan { client_indices: parts, heterogeneity })
}

/// Dirichlet partition, kept under its conventional name.
pub fn partition_dirichlet(dataset: &Dataset, clients: usize, alpha: f64, seed: u64) -> Result<PartitionPlan, DataError> {
    partition(dataset, clients, Heterogeneity::Dirichlet(alpha), seed)
}

/// Which column of a CSV file holds the class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

/// Reads a comma-separated file with a header row. Every non-label cell must
/// parse as a number; labels must be non-negative integers below
/// `num_classes` (inferred as `max + 1` when not given).
pub fn load_csv(path: &Path, label: &LabelColumn, num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: shown.clone(), source })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|source| DataError::Csv { path: shown.clone(), source })?.clone();
    let label_idx = match label {
        LabelColumn::Index(i) if *i < headers.len() => *i,
        LabelColumn::Index(i) => {
            return Err(DataError::MissingLabelColumn { path: shown, column: i.to_string() });
        }
        LabelColumn::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingLabelColumn { path: shown.clone(), column: name.clone() })?,
    };
    let width = headers.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| DataError::Csv { path: shown.clone(), source })?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |message: String| DataError::Malformed { path: shown.clone(), line, message };
        if record.len() != width {
            return Err(malformed(format!("expected {width} fields, found {}", record.len())));
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                let label: usize = cell
                    .parse()
                    .map_err(|_| malformed(format!("label {cell:?} is not a non-negative integer")))?;
                if let Some(k) = num_classes {
                    if label >= k {
                        return Err(malformed(format!("label {label} out of range for {k} classes")));
                    }
                }
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| malformed(format!("column {}: {cell:?} is not numeric", c + 1)))?;
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = Matrix::from_vec(labels.len(), width - 1, data).expect("fields counted per row");
    Dataset::new(features, labels, classes)
}

/// Writes `dataset` as CSV: feature columns `x0..`, then a `label` column.
/// Values are written in shortest round-trip form.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let shown = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|source| DataError::Csv { path: shown.clone(), source })?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|c| format!("x{c}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|source| DataError::Csv { path: shown.clone(), source })?;
    for r in 0..dataset.len() {
        let mut row: Vec<String> = dataset.features.row(r).iter().map(|v| format!("{v:?}")).collect();
        row.push(dataset.labels[r].to_string());
        w.write_record(&row).map_err(|source| DataError::Csv { path: shown.clone(), source })?;
    }
    w.flush().map_err(|source| DataError::Io { path: shown, source })
}
