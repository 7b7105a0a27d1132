//! Tabular data loading, encoding, and labeled/unlabeled/test splitting.
//!
//! Features are stored as a dense `K × v` matrix. The sensitive attribute is
//! kept in a separate vector and never appears among the feature columns.
//! Missing numeric cells are stored as `NaN` after loading and are imputed
//! when a training pool is fixed by [`split`].

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FairError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    /// Standardized numeric column.
    Numeric,
    /// One indicator column of a one-hot encoded categorical.
    OneHot,
}

/// Feature matrix with sensitive attribute and optional binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    sensitive: Vec<u8>,
    labels: Option<Vec<u8>>,
    feature_names: Vec<String>,
    kinds: Vec<ColumnKind>,
}

fn check_binary(values: &[u8], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|&v| v > 1) {
        return Err(FairError::InvalidArgument(format!(
            "{what} must be 0/1, found {} at row {pos}",
            values[pos]
        )));
    }
    Ok(())
}

impl Dataset {
    /// Builds a dataset with all columns treated as numeric.
    pub fn new(
        features: DMatrix<f64>,
        sensitive: Vec<u8>,
        labels: Option<Vec<u8>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let kinds = vec![ColumnKind::Numeric; features.ncols()];
        Self::with_kinds(features, sensitive, labels, feature_names, kinds)
    }

    pub fn with_kinds(
        features: DMatrix<f64>,
        sensitive: Vec<u8>,
        labels: Option<Vec<u8>>,
        feature_names: Vec<String>,
        kinds: Vec<ColumnKind>,
    ) -> Result<Self> {
        if features.nrows() != sensitive.len() {
            return Err(FairError::Dimension(format!(
                "{} feature rows but {} sensitive values",
                features.nrows(),
                sensitive.len()
            )));
        }
        if let Some(y) = &labels {
            if y.len() != sensitive.len() {
                return Err(FairError::Dimension(format!(
                    "{} labels for {} rows",
                    y.len(),
                    sensitive.len()
                )));
            }
            check_binary(y, "labels")?;
        }
        if feature_names.len() != features.ncols() || kinds.len() != features.ncols() {
            return Err(FairError::Dimension(
                "feature names/kinds do not match column count".into(),
            ));
        }
        check_binary(&sensitive, "sensitive attribute")?;
        Ok(Self {
            features,
            sensitive,
            labels,
            feature_names,
            kinds,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn sensitive(&self) -> &[u8] {
        &self.sensitive
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[u8]> {
        self.labels()
            .ok_or_else(|| FairError::MissingLabels("dataset".into()))
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn kinds(&self) -> &[ColumnKind] {
        &self.kinds
    }

    /// Both sensitive groups occur at least once.
    pub fn has_both_groups(&self) -> bool {
        self.sensitive.contains(&0) && self.sensitive.contains(&1)
    }

    /// Rows at `idx`, in that order. Indices may repeat.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let v = self.n_features();
        let features = DMatrix::from_fn(idx.len(), v, |r, c| self.features[(idx[r], c)]);
        Dataset {
            features,
            sensitive: idx.iter().map(|&i| self.sensitive[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|y| idx.iter().map(|&i| y[i]).collect()),
            feature_names: self.feature_names.clone(),
            kinds: self.kinds.clone(),
        }
    }

    /// Stacks `other` below `self`. Labels survive only if both sides carry them.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.n_features() != other.n_features() {
            return Err(FairError::Dimension("concat: feature counts differ".into()));
        }
        let (a, b) = (self.n_rows(), other.n_rows());
        let features = DMatrix::from_fn(a + b, self.n_features(), |r, c| {
            if r < a {
                self.features[(r, c)]
            } else {
                other.features[(r - a, c)]
            }
        });
        let mut sensitive = self.sensitive.clone();
        sensitive.extend_from_slice(&other.sensitive);
        let labels = match (&self.labels, &other.labels) {
            (Some(x), Some(y)) => Some(x.iter().chain(y).copied().collect()),
            _ => None,
        };
        Ok(Dataset {
            features,
            sensitive,
            labels,
            feature_names: self.feature_names.clone(),
            kinds: self.kinds.clone(),
        })
    }

    /// Same rows with labels removed.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            labels: None,
            ..self.clone()
        }
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Dataset> {
        Dataset::with_kinds(
            self.features.clone(),
            self.sensitive.clone(),
            Some(labels),
            self.feature_names.clone(),
            self.kinds.clone(),
        )
    }
}

/// Per-column affine transform fit on a training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    means: Vec<f64>,
    scales: Vec<f64>,
    kinds: Vec<ColumnKind>,
}

impl Standardizer {
    /// Fits means and standard deviations of the numeric columns of `pool`.
    /// Missing (`NaN`) cells are ignored for the mean and count as the mean
    /// for the variance, which is what imputation produces.
    pub fn fit(pool: &Dataset) -> Self {
        let n = pool.n_rows();
        let mut means = vec![0.0; pool.n_features()];
        let mut scales = vec![1.0; pool.n_features()];
        for (c, kind) in pool.kinds.iter().enumerate() {
            if *kind != ColumnKind::Numeric || n == 0 {
                continue;
            }
            let col = pool.features.column(c);
            let present: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
            if present.is_empty() {
                continue;
            }
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            let ss: f64 = present.iter().map(|v| (v - mean) * (v - mean)).sum();
            let var = ss / n as f64;
            means[c] = mean;
            scales[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self {
            means,
            scales,
            kinds: pool.kinds.clone(),
        }
    }

    /// Imputes missing numeric cells with the pool mean and standardizes.
    pub fn apply(&self, d: &Dataset) -> Dataset {
        let mut out = d.clone();
        for (c, kind) in self.kinds.iter().enumerate() {
            if *kind != ColumnKind::Numeric {
                continue;
            }
            for v in out.features.column_mut(c).iter_mut() {
                let raw = if v.is_nan() { self.means[c] } else { *v };
                *v = (raw - self.means[c]) / self.scales[c];
            }
        }
        out
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "NaN" | "nan" | "?")
}

fn parse_binary(cell: &str) -> Option<u8> {
    let v: f64 = cell.parse().ok()?;
    if v == 0.0 {
        Some(0)
    } else if v == 1.0 {
        Some(1)
    } else {
        None
    }
}

/// Reads a comma-separated file with a header row.
///
/// The sensitive column is removed from the features; other non-numeric
/// columns are one-hot encoded (levels sorted); numeric columns are
/// standardized over all rows. Rows with a missing label or sensitive value
/// are dropped.
pub fn load_csv(
    path: impl AsRef<Path>,
    sensitive_column: &str,
    label_column: &str,
) -> Result<Dataset> {
    let path = path.as_ref();
    let io_err = |e: &dyn std::fmt::Display| FairError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| io_err(&e))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| io_err(&e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| FairError::MissingColumn(name.to_string()))
    };
    let s_col = find(sensitive_column)?;
    let y_col = find(label_column)?;

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut sensitive = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| FairError::Cell {
            line,
            column: "*".into(),
            message: e.to_string(),
        })?;
        let cells: Vec<String> = rec.iter().map(|c| c.trim().to_string()).collect();
        let (s_raw, y_raw) = (&cells[s_col], &cells[y_col]);
        if is_missing(s_raw) || is_missing(y_raw) {
            continue;
        }
        let s = parse_binary(s_raw).ok_or_else(|| FairError::Cell {
            line,
            column: sensitive_column.into(),
            message: format!("sensitive value `{s_raw}` is not 0/1"),
        })?;
        let y = parse_binary(y_raw).ok_or_else(|| FairError::Cell {
            line,
            column: label_column.into(),
            message: format!("label `{y_raw}` is not 0/1"),
        })?;
        sensitive.push(s);
        labels.push(y);
        rows.push(cells);
    }
    if rows.is_empty() {
        return Err(FairError::Empty(format!("{} has no data rows", path.display())));
    }
    if !(sensitive.contains(&0) && sensitive.contains(&1)) {
        return Err(FairError::SingleGroup);
    }

    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    for (c, header) in headers.iter().enumerate() {
        if c == s_col || c == y_col {
            continue;
        }
        let cells: Vec<&str> = rows.iter().map(|r| r[c].as_str()).collect();
        let numeric: Option<Vec<f64>> = cells
            .iter()
            .map(|cell| {
                if is_missing(cell) {
                    Some(f64::NAN)
                } else {
                    cell.parse::<f64>().ok().filter(|v| v.is_finite())
                }
            })
            .collect();
        match numeric {
            Some(values) => {
                columns.push(values);
                names.push(header.clone());
                kinds.push(ColumnKind::Numeric);
            }
            None => {
                let levels: BTreeSet<&str> = cells.iter().copied().collect();
                for level in levels {
                    columns.push(
                        cells
                            .iter()
                            .map(|cell| if *cell == level { 1.0 } else { 0.0 })
                            .collect(),
                    );
                    let shown = if is_missing(level) { "<missing>" } else { level };
                    names.push(format!("{header}={shown}"));
                    kinds.push(ColumnKind::OneHot);
                }
            }
        }
    }
    let n = rows.len();
    let features = DMatrix::from_fn(n, columns.len(), |r, c| columns[c][r]);
    let raw = Dataset::with_kinds(features, sensitive, Some(labels), names, kinds)?;
    let standardized = Standardizer::fit(&raw).apply(&raw);
    // Missing cells stay missing until a training pool is known.
    let mut out = standardized;
    for c in 0..out.n_features() {
        for r in 0..n {
            if raw.features[(r, c)].is_nan() {
                out.features[(r, c)] = f64::NAN;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Caps the unlabeled part; `None` keeps every remaining row.
    pub n_unlabeled: Option<usize>,
}

impl SplitSpec {
    pub fn new(n_labeled: usize, n_test: usize, seed: u64) -> Self {
        Self {
            n_labeled,
            n_test,
            seed,
            n_unlabeled: None,
        }
    }

    pub fn with_unlabeled(mut self, n: usize) -> Self {
        self.n_unlabeled = Some(n);
        self
    }
}

/// Row indices of each part into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

/// Result of [`split`]. The unlabeled part keeps its ground-truth labels for
/// evaluation; training code must only read them through [`Split::hidden_truth`].
#[derive(Debug, Clone)]
pub struct Split {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub test: Dataset,
    pub indices: SplitIndices,
    unlabeled_truth: Option<Vec<u8>>,
}

impl Split {
    pub fn hidden_truth(&self) -> Option<&[u8]> {
        self.unlabeled_truth.as_deref()
    }
}

/// Random labeled/unlabeled/test partition. Features are re-standardized with
/// statistics of the labeled+unlabeled pool, which are also applied to the
/// test rows.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let k = d.n_rows();
    if spec.n_labeled == 0 || spec.n_test == 0 {
        return Err(FairError::Split("labeled and test parts must be non-empty".into()));
    }
    if spec.n_labeled + spec.n_test >= k {
        return Err(FairError::Split(format!(
            "{} labeled + {} test leaves no unlabeled rows out of {k}",
            spec.n_labeled, spec.n_test
        )));
    }
    let available = k - spec.n_labeled - spec.n_test;
    let n_unlabeled = spec.n_unlabeled.unwrap_or(available);
    if n_unlabeled > available {
        return Err(FairError::Split(format!(
            "requested {n_unlabeled} unlabeled rows, only {available} available"
        )));
    }
    let mut perm: Vec<usize> = (0..k).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let labeled_idx = perm[..spec.n_labeled].to_vec();
    let test_idx = perm[spec.n_labeled..spec.n_labeled + spec.n_test].to_vec();
    let start = spec.n_labeled + spec.n_test;
    let unlabeled_idx = perm[start..start + n_unlabeled].to_vec();

    let labeled = d.select(&labeled_idx);
    let unlabeled = d.select(&unlabeled_idx);
    let test = d.select(&test_idx);
    let pool = labeled.concat(&unlabeled)?;
    let st = Standardizer::fit(&pool);
    let unlabeled_truth = unlabeled.labels.clone();
    Ok(Split {
        labeled: st.apply(&labeled),
        unlabeled: st.apply(&unlabeled).without_labels(),
        test: st.apply(&test),
        indices: SplitIndices {
            labeled: labeled_idx,
            unlabeled: unlabeled_idx,
            test: test_idx,
        },
        unlabeled_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let f = write_csv("y,s,color,x\n1,0,red,1.0\n0,1,green,2.0\n1,1,blue,3.0\n0,0,red,4.0\n");
        let d = load_csv(f.path(), "s", "y").unwrap();
        assert_eq!(d.n_rows(), 4);
        assert_eq!(d.n_features(), 4);
        let onehot: Vec<usize> = d
            .kinds()
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == ColumnKind::OneHot)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(onehot.len(), 3);
        for r in 0..4 {
            let s: f64 = onehot.iter().map(|&c| d.features()[(r, c)]).sum();
            assert_eq!(s, 1.0);
        }
        assert!(!d.feature_names().iter().any(|n| n == "s"));
    }

    #[test]
    fn single_group_rejected() {
        let f = write_csv("y,s,x\n1,0,1\n0,0,2\n");
        assert_eq!(load_csv(f.path(), "s", "y").unwrap_err(), FairError::SingleGroup);
    }

    #[test]
    fn missing_column_and_bad_cells() {
        let f = write_csv("y,s,x\n1,0,1\n0,1,2\n");
        assert!(matches!(
            load_csv(f.path(), "gender", "y"),
            Err(FairError::MissingColumn(_))
        ));
        let f = write_csv("y,s,x\n1,0,1\n0,2,2\n");
        match load_csv(f.path(), "s", "y") {
            Err(FairError::Cell { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "s");
            }
            other => panic!("unexpected {other:?}"),
        }
        let f = write_csv("y,s,x\n");
        assert!(matches!(load_csv(f.path(), "s", "y"), Err(FairError::Empty(_))));
    }

    #[test]
    fn rows_with_missing_label_dropped_and_features_imputed() {
        let f = write_csv("y,s,x\n1,0,1\n,1,2\n0,1,\n1,1,5\n0,0,3\n");
        let d = load_csv(f.path(), "s", "y").unwrap();
        assert_eq!(d.n_rows(), 4);
        assert!(d.features()[(1, 0)].is_nan());
        let sp = split(&d, &SplitSpec::new(1, 1, 3)).unwrap();
        let pool = sp.labeled.concat(&sp.unlabeled).unwrap();
        assert!(pool.features().iter().all(|v| v.is_finite()));
    }

    fn synthetic(n: usize) -> Dataset {
        let features = DMatrix::from_fn(n, 3, |r, c| ((r * 7 + c * 13) % 11) as f64 + c as f64);
        let s = (0..n).map(|i| (i % 2) as u8).collect();
        let y = (0..n).map(|i| ((i / 3) % 2) as u8).collect();
        Dataset::new(features, s, Some(y), vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let d = synthetic(50);
        let spec = SplitSpec::new(10, 15, 42);
        let a = split(&d, &spec).unwrap();
        let b = split(&d, &spec).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.unlabeled.n_rows(), 25);
        let mut all: Vec<usize> = a
            .indices
            .labeled
            .iter()
            .chain(&a.indices.unlabeled)
            .chain(&a.indices.test)
            .copied()
            .collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(a.unlabeled.labels().is_none());
        assert_eq!(a.hidden_truth().unwrap().len(), 25);
    }

    #[test]
    fn split_rejects_empty_parts() {
        let d = synthetic(20);
        assert!(split(&d, &SplitSpec::new(20, 0, 1)).is_err());
        assert!(split(&d, &SplitSpec::new(10, 10, 1)).is_err());
        assert!(split(&d, &SplitSpec::new(5, 5, 1).with_unlabeled(11)).is_err());
        let sp = split(&d, &SplitSpec::new(5, 5, 1).with_unlabeled(0)).unwrap();
        assert_eq!(sp.unlabeled.n_rows(), 0);
    }

    #[test]
    fn pool_is_standardized() {
        let d = synthetic(60);
        let sp = split(&d, &SplitSpec::new(12, 18, 7)).unwrap();
        let pool = sp.labeled.concat(&sp.unlabeled).unwrap();
        for c in 0..pool.n_features() {
            let col = pool.features().column(c);
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
