//! Dataset loading, standardization, subsampling, and synthetic generators.

use crate::numeric::sigmoid;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed row {row}: expected {expected} comma-separated fields, got {got}")]
    ParseError { row: usize, expected: usize, got: usize },
    #[error("non-numeric feature at row {row}, column {column}: {cell:?}")]
    NonNumericFeature { row: usize, column: usize, cell: String },
    #[error("label at row {row} must be 0 or 1, got {cell:?}")]
    InvalidLabel { row: usize, cell: String },
    #[error("label column {column} out of range for {width} columns")]
    LabelColumnOutOfRange { column: usize, width: usize },
    #[error("dataset contains no rows")]
    EmptyDataset,
    #[error("row {row} has {got} features, expected {expected}")]
    DimensionMismatch { row: usize, got: usize, expected: usize },
    #[error("non-finite feature at row {row}, column {column}")]
    NonFiniteFeature { row: usize, column: usize },
    #[error("stratified subsampling needs both classes present")]
    SingleClassDataset,
    #[error("cannot draw {requested} training rows from {available}")]
    SubsampleTooLarge { requested: usize, available: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A binary-labeled feature matrix with a provenance note describing how it
/// was produced (file, generator, standardization, subsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub provenance: String,
}

impl Dataset {
    /// Validates shape and finiteness and wraps the rows.
    pub fn from_rows(
        name: impl Into<String>,
        features: Vec<Vec<f64>>,
        labels: Vec<bool>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(DataError::EmptyDataset);
        }
        let d = features[0].len();
        for (row, feats) in features.iter().enumerate() {
            if feats.len() != d {
                return Err(DataError::DimensionMismatch { row, got: feats.len(), expected: d });
            }
            if let Some(column) = feats.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteFeature { row, column });
            }
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// (negatives, positives).
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&y| y).count();
        (self.labels.len() - pos, pos)
    }
}

/// Loads a comma-separated file with numeric features and a 0/1 label in
/// `label_column`. A single leading header line is tolerated and skipped.
/// Features are standardized to zero mean and unit variance per column
/// (constant columns become all-zero); the provenance note records this.
pub fn load_csv_dataset(path: &Path, label_column: usize) -> Result<Dataset> {
    let raw = std::fs::read_to_string(path)?;
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;

    for (row, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = *width.get_or_insert(cells.len());
        if cells.len() != expected {
            return Err(DataError::ParseError { row, expected, got: cells.len() });
        }
        if label_column >= cells.len() {
            return Err(DataError::LabelColumnOutOfRange {
                column: label_column,
                width: cells.len(),
            });
        }
        let parsed: Vec<std::result::Result<f64, _>> =
            cells.iter().map(|c| c.parse::<f64>()).collect();
        if row == 0 && parsed.iter().any(|p| p.is_err()) {
            // Header line: every subsequent row must parse.
            continue;
        }
        let mut feats = Vec::with_capacity(cells.len() - 1);
        let mut label = None;
        for (column, value) in parsed.into_iter().enumerate() {
            let value = value.map_err(|_| DataError::NonNumericFeature {
                row,
                column,
                cell: cells[column].to_string(),
            })?;
            if column == label_column {
                label = Some(match value {
                    v if v == 0.0 => false,
                    v if v == 1.0 => true,
                    _ => {
                        return Err(DataError::InvalidLabel {
                            row,
                            cell: cells[column].to_string(),
                        })
                    }
                });
            } else {
                if !value.is_finite() {
                    return Err(DataError::NonFiniteFeature { row, column });
                }
                feats.push(value);
            }
        }
        features.push(feats);
        labels.push(label.expect("label column visited"));
    }
    if features.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    standardize_columns(&mut features);
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let provenance = format!(
        "loaded from {}; features standardized to zero mean, unit variance per column",
        path.display()
    );
    Dataset::from_rows(name, features, labels, provenance)
}

/// In-place per-column standardization; constant columns are zeroed.
fn standardize_columns(features: &mut [Vec<f64>]) {
    let n = features.len();
    if n == 0 {
        return;
    }
    let d = features[0].len();
    for j in 0..d {
        let mean = features.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = features.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for row in features.iter_mut() {
            row[j] = if sd > 0.0 { (row[j] - mean) / sd } else { 0.0 };
        }
    }
}

/// Splits into `n_train` training rows and the remaining test rows while
/// keeping class proportions within one count of proportional allocation.
pub fn stratified_subsample<R: Rng + ?Sized>(
    ds: &Dataset,
    n_train: usize,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    let (neg, pos) = ds.class_counts();
    if neg == 0 || pos == 0 {
        return Err(DataError::SingleClassDataset);
    }
    if n_train > ds.len() {
        return Err(DataError::SubsampleTooLarge { requested: n_train, available: ds.len() });
    }
    if n_train == ds.len() {
        log::warn!("stratified subsample uses every row; the test split is empty");
    }

    // Proportional allocation of training slots to the positive class,
    // clamped so both splits stay feasible.
    let ideal_pos = (n_train as f64 * pos as f64 / ds.len() as f64).round() as usize;
    let take_pos = ideal_pos.min(pos).max(n_train.saturating_sub(neg));
    let take_neg = n_train - take_pos;

    let mut pos_idx: Vec<usize> =
        (0..ds.len()).filter(|&i| ds.labels[i]).collect();
    let mut neg_idx: Vec<usize> =
        (0..ds.len()).filter(|&i| !ds.labels[i]).collect();
    pos_idx.shuffle(rng);
    neg_idx.shuffle(rng);

    let mut train_idx: Vec<usize> = pos_idx[..take_pos]
        .iter()
        .chain(&neg_idx[..take_neg])
        .copied()
        .collect();
    let mut test_idx: Vec<usize> = pos_idx[take_pos..]
        .iter()
        .chain(&neg_idx[take_neg..])
        .copied()
        .collect();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let pick = |idx: &[usize], split: &str| Dataset {
        name: format!("{}-{split}", ds.name),
        features: idx.iter().map(|&i| ds.features[i].clone()).collect(),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        provenance: format!("{}; stratified {split} split ({} rows)", ds.provenance, idx.len()),
    };
    Ok((pick(&train_idx, "train"), pick(&test_idx, "test")))
}

/// Draws logistic-regression data from the generative model
/// `w ∼ N(0, I)`, `x_i ∼ N(0, I)`, `y_i ∼ Bernoulli(sigmoid(x_iᵀw))` and
/// returns the dataset together with the weights that generated it.
pub fn synthetic_logistic<R: Rng + ?Sized>(
    d: usize,
    n: usize,
    rng: &mut R,
) -> (Dataset, Vec<f64>) {
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let ds = synthetic_logistic_with_weights(&w, n, rng);
    (ds, w)
}

/// As [`synthetic_logistic`] but with the weights held fixed by the caller,
/// for sequences of related problems sharing one underlying model.
pub fn synthetic_logistic_with_weights<R: Rng + ?Sized>(
    w: &[f64],
    n: usize,
    rng: &mut R,
) -> Dataset {
    let d = w.len();
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let act: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum();
        labels.push(rng.gen::<f64>() < sigmoid(act));
        features.push(x);
    }
    Dataset::from_rows(
        format!("synthetic-logistic-d{d}-n{n}"),
        features,
        labels,
        format!("generated: w ~ N(0,I), x ~ N(0,I)^{d}, y ~ Bernoulli(sigmoid(x'w)), n={n}"),
    )
    .expect("generated rows are well-formed")
}

/// Zero-mean Gaussian observations with precision `tau`.
pub fn gaussian_precision_observations<R: Rng + ?Sized>(
    n: usize,
    tau: f64,
    rng: &mut R,
) -> Vec<f64> {
    let sd = (1.0 / tau).sqrt();
    (0..n)
        .map(|_| {
            let draw: f64 = StandardNormal.sample(rng);
            draw * sd
        })
        .collect()
}
