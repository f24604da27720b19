//! Domain types shared across the crate, validated on construction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on row norms of features and prototypes.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Tolerance on the simplex sum of an in-memory confidence vector.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Scale every row to unit L2 norm. Zero rows are left untouched.
    pub fn normalize_rows(&mut self) {
        let cols = self.cols;
        if cols == 0 {
            return;
        }
        for row in self.data.chunks_exact_mut(cols) {
            normalize(row);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scale `v` to unit norm in place; returns the original norm.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// A probability distribution over the classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceVector(Vec<f64>);

impl ConfidenceVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        Self::with_tolerance(probs, SIMPLEX_TOL)
    }

    pub fn with_tolerance(probs: Vec<f64>, tol: f64) -> Result<Self> {
        check_simplex(&probs, tol)?;
        Ok(ConfidenceVector(probs))
    }

    /// Wraps a vector already known to be on the simplex (softmax output).
    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        debug_assert!(check_simplex(&probs, SIMPLEX_TOL).is_ok());
        ConfidenceVector(probs)
    }

    pub fn uniform(num_classes: usize) -> Self {
        ConfidenceVector(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for ConfidenceVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn check_simplex(probs: &[f64], tol: f64) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::NotOnSimplex("empty vector".into()));
    }
    if let Some((j, p)) = probs
        .iter()
        .enumerate()
        .find(|(_, p)| !(0.0..=1.0).contains(*p))
    {
        return Err(Error::NotOnSimplex(format!("entry {j} = {p} outside [0, 1]")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(Error::NotOnSimplex(format!(
            "entries sum to {sum}, tolerance {tol}"
        )));
    }
    Ok(())
}

/// N rows of per-class confidences, each row on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix(Matrix);

impl ConfidenceMatrix {
    pub fn new(m: Matrix, tol: f64) -> Result<Self> {
        for (i, row) in m.iter_rows().enumerate() {
            check_simplex(row, tol)
                .map_err(|e| Error::NotOnSimplex(format!("row {i}: {e}")))?;
        }
        Ok(ConfidenceMatrix(m))
    }

    pub(crate) fn from_softmax_rows(m: Matrix) -> Self {
        ConfidenceMatrix(m)
    }

    pub fn num_samples(&self) -> usize {
        self.0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Per-class sample counts at some epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub counts: Vec<usize>,
    pub epoch: usize,
}

impl ClassCounts {
    pub fn from_labels(labels: &[usize], num_classes: usize, epoch: usize) -> Self {
        let mut counts = vec![0; num_classes];
        for &y in labels {
            counts[y] += 1;
        }
        ClassCounts { counts, epoch }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn get(&self, c: usize) -> usize {
        self.counts[c]
    }
}

/// Accumulated per-sample, per-class consensus evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMatrix {
    values: Matrix,
    epoch: usize,
}

impl FrequencyMatrix {
    /// Epoch-0 state: each row is the (weighted) one-hot of the observed label.
    pub fn from_observed(observed: &[usize], num_classes: usize, be_weight: f64) -> Self {
        let mut values = Matrix::zeros(observed.len(), num_classes);
        for (i, &y) in observed.iter().enumerate() {
            values.row_mut(i)[y] = be_weight;
        }
        FrequencyMatrix { values, epoch: 0 }
    }

    pub fn zeros(num_samples: usize, num_classes: usize) -> Self {
        FrequencyMatrix {
            values: Matrix::zeros(num_samples, num_classes),
            epoch: 0,
        }
    }

    /// Builds from raw values; every entry must be finite and non-negative.
    pub fn from_matrix(values: Matrix, epoch: usize) -> Result<Self> {
        if let Some(x) = values.as_slice().iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::invalid(format!(
                "frequency entries must be finite and non-negative, found {x}"
            )));
        }
        Ok(FrequencyMatrix { values, epoch })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn num_samples(&self) -> usize {
        self.values.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub(crate) fn advance_epoch(&mut self) {
        self.epoch += 1;
    }
}

/// Hard labels read off a frequency matrix, with their counts and prior.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RectifiedState {
    pub labels: Vec<usize>,
    pub counts: ClassCounts,
    pub prior: Vec<f64>,
}

impl RectifiedState {
    pub fn from_labels(labels: Vec<usize>, num_classes: usize, epoch: usize) -> Self {
        let counts = ClassCounts::from_labels(&labels, num_classes, epoch);
        let n = labels.len() as f64;
        let prior = counts.counts.iter().map(|&c| c as f64 / n).collect();
        RectifiedState {
            labels,
            counts,
            prior,
        }
    }
}

/// Raw dataset contents before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetParts {
    pub num_classes: usize,
    pub features: Matrix,
    pub prototypes: Matrix,
    pub observed_labels: Vec<usize>,
    pub true_labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSet {
    Observed,
    True,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSet {
    Feature,
    Prototype,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    LabelOutOfRange {
        labels: LabelSet,
        sample: usize,
        label: usize,
    },
    NonNormalizedRow {
        rows: RowSet,
        index: usize,
        norm: f64,
    },
    LengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    Empty {
        what: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LabelOutOfRange {
                labels,
                sample,
                label,
            } => write!(f, "{labels:?} label {label} of sample {sample} is out of range"),
            Violation::NonNormalizedRow { rows, index, norm } => {
                write!(f, "{rows:?} row {index} has norm {norm}")
            }
            Violation::LengthMismatch {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected length {expected}, found {found}"),
            Violation::Empty { what } => write!(f, "{what} is empty"),
        }
    }
}

/// Every invariant violation found in a dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in self.violations.iter().take(10) {
            write!(f, "; {v}")?;
        }
        if self.violations.len() > 10 {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

/// Checks every dataset invariant and reports all violations at once.
pub fn validate_dataset(parts: &DatasetParts) -> std::result::Result<(), ValidationReport> {
    let mut v = Vec::new();
    let c = parts.num_classes;
    let n = parts.features.rows();
    if c == 0 {
        v.push(Violation::Empty {
            what: "class set".into(),
        });
    }
    if n == 0 {
        v.push(Violation::Empty {
            what: "feature matrix".into(),
        });
    }
    if parts.features.cols() == 0 {
        v.push(Violation::Empty {
            what: "feature dimension".into(),
        });
    }
    if parts.observed_labels.len() != n {
        v.push(Violation::LengthMismatch {
            what: "observed labels".into(),
            expected: n,
            found: parts.observed_labels.len(),
        });
    }
    if parts.prototypes.rows() != c {
        v.push(Violation::LengthMismatch {
            what: "prototype rows".into(),
            expected: c,
            found: parts.prototypes.rows(),
        });
    }
    if parts.prototypes.cols() != parts.features.cols() {
        v.push(Violation::LengthMismatch {
            what: "prototype dimension".into(),
            expected: parts.features.cols(),
            found: parts.prototypes.cols(),
        });
    }
    let mut check_labels = |labels: &[usize], which| {
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                v.push(Violation::LabelOutOfRange {
                    labels: which,
                    sample: i,
                    label: y,
                });
            }
        }
    };
    check_labels(&parts.observed_labels, LabelSet::Observed);
    if let Some(truth) = &parts.true_labels {
        check_labels(truth, LabelSet::True);
        if truth.len() != n {
            v.push(Violation::LengthMismatch {
                what: "true labels".into(),
                expected: n,
                found: truth.len(),
            });
        }
    }
    for (rows, m) in [
        (RowSet::Feature, &parts.features),
        (RowSet::Prototype, &parts.prototypes),
    ] {
        for (i, row) in m.iter_rows().enumerate() {
            let norm = l2_norm(row);
            if norm.is_nan() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                v.push(Violation::NonNormalizedRow {
                    rows,
                    index: i,
                    norm,
                });
            }
        }
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(ValidationReport { violations: v })
    }
}

/// A validated dataset: unit-norm features and prototypes plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset(DatasetParts);

impl Dataset {
    pub fn new(parts: DatasetParts) -> std::result::Result<Self, ValidationReport> {
        validate_dataset(&parts)?;
        Ok(Dataset(parts))
    }

    pub fn num_samples(&self) -> usize {
        self.0.features.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.0.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.0.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.0.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        self.0.features.row(i)
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.0.prototypes
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.0.observed_labels
    }

    pub fn true_labels(&self) -> Option<&[usize]> {
        self.0.true_labels.as_deref()
    }

    pub fn require_truth(&self) -> Result<&[usize]> {
        self.true_labels().ok_or(Error::MissingTruth)
    }

    pub fn observed_counts(&self) -> ClassCounts {
        ClassCounts::from_labels(self.observed_labels(), self.num_classes(), 0)
    }

    pub fn parts(&self) -> &DatasetParts {
        &self.0
    }

    pub fn into_parts(self) -> DatasetParts {
        self.0
    }

    /// Same features and truth, different observed labels.
    pub fn with_observed_labels(&self, observed: Vec<usize>) -> std::result::Result<Self, ValidationReport> {
        let mut parts = self.0.clone();
        parts.observed_labels = observed;
        Dataset::new(parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_rows(rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            m.row_mut(i)[i % cols] = 1.0;
        }
        m
    }

    fn parts() -> DatasetParts {
        DatasetParts {
            num_classes: 3,
            features: unit_rows(5, 4),
            prototypes: unit_rows(3, 4),
            observed_labels: vec![0, 1, 2, 0, 1],
            true_labels: Some(vec![0, 1, 2, 0, 1]),
        }
    }

    #[test]
    fn valid_dataset_passes() {
        assert!(validate_dataset(&parts()).is_ok());
        assert!(Dataset::new(parts()).is_ok());
    }

    #[test]
    fn out_of_range_label_names_the_sample() {
        let mut p = parts();
        p.observed_labels[3] = 3;
        let report = validate_dataset(&p).unwrap_err();
        assert_eq!(
            report.violations,
            vec![Violation::LabelOutOfRange {
                labels: LabelSet::Observed,
                sample: 3,
                label: 3
            }]
        );
    }

    #[test]
    fn half_norm_row_is_rejected() {
        let mut p = parts();
        p.features.row_mut(2).copy_from_slice(&[0.5, 0.0, 0.0, 0.0]);
        let report = validate_dataset(&p).unwrap_err();
        assert!(matches!(
            report.violations.as_slice(),
            [Violation::NonNormalizedRow {
                rows: RowSet::Feature,
                index: 2,
                ..
            }]
        ));
    }

    #[test]
    fn every_violation_is_reported() {
        let mut p = parts();
        p.observed_labels.pop();
        p.true_labels = Some(vec![0, 9, 2, 0, 1]);
        p.prototypes.row_mut(1)[0] = 3.0;
        let report = validate_dataset(&p).unwrap_err();
        assert_eq!(report.violations.len(), 3, "{report}");
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[0.6, 0.0, 2.49]), 2);
    }

    #[test]
    fn rectified_prior_sums_to_one() {
        let s = RectifiedState::from_labels(vec![0, 0, 1], 2, 1);
        assert_eq!(s.counts.counts, vec![2, 1]);
        assert!((s.prior[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.prior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn normalized_vectors_accepted_perturbed_rejected(
            raw in prop::collection::vec(0.01f64..10.0, 2..20),
            idx in any::<prop::sample::Index>(),
            sign in prop::bool::ANY,
        ) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
            prop_assert!(ConfidenceVector::new(p.clone()).is_ok());
            let mut q = p;
            let j = idx.index(q.len());
            q[j] += if sign { 0.01 } else { -0.01 };
            prop_assert!(ConfidenceVector::new(q).is_err());
        }

        #[test]
        fn argmax_matches_independent_scan(
            v in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0, 2.0]), 1..8)
        ) {
            let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = v.iter().position(|&x| x == max).unwrap();
            prop_assert_eq!(argmax(&v), first);
        }
    }
}
