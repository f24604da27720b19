//! Confidence sources for the consensus: text prototypes (TE), a trainable
//! cosine classifier (IE) and the observed label itself (BE).

use std::path::PathBuf;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::types::{dot, l2_norm, ConfidenceMatrix, ConfidenceVector, Dataset, Matrix, UNIT_NORM_TOL};

pub const DEFAULT_SCALE: f64 = 25.0;

/// Max-subtracted softmax of `scale * sims`.
pub fn scaled_softmax(sims: &[f64], scale: f64) -> Vec<f64> {
    let max = sims
        .iter()
        .map(|&x| scale * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = sims.iter().map(|&x| (scale * x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

/// Linear classifier with cosine-similarity logits `s * <w_c, f> / |w_c|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHead {
    weights: Matrix,
    scale: f64,
}

impl CosineHead {
    /// Rows are normalized on construction.
    pub fn new(mut weights: Matrix, scale: f64) -> Result<Self> {
        if scale <= 0.0 || !scale.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        if let Some(i) = (0..weights.rows()).find(|&i| weights.row(i).iter().all(|&x| x == 0.0)) {
            return Err(Error::invalid(format!("weight row {i} is zero")));
        }
        weights.normalize_rows();
        Ok(CosineHead { weights, scale })
    }

    /// Takes rows that are already unit-norm (within tolerance) as they are.
    pub fn from_unit_rows(weights: Matrix, scale: f64) -> Result<Self> {
        if scale <= 0.0 || !scale.is_finite() {
            return Err(Error::invalid(format!("scale must be positive, got {scale}")));
        }
        if let Some(i) = (0..weights.rows()).find(|&i| (l2_norm(weights.row(i)) - 1.0).abs() > UNIT_NORM_TOL) {
            return Err(Error::invalid(format!("weight row {i} is not unit-norm")));
        }
        Ok(CosineHead { weights, scale })
    }

    /// Random unit rows drawn from the seeded stream.
    pub fn random(num_classes: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut w = Matrix::zeros(num_classes, dim);
        for c in 0..num_classes {
            let mut rng = stream(seed, Domain::HeadInit, c as u64);
            for x in w.row_mut(c) {
                *x = rng.sample(StandardNormal);
            }
        }
        CosineHead::new(w, scale)
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Logits for a unit-norm feature. Rows are kept unit-norm, so this is a
    /// plain scaled dot product.
    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        self.weights
            .iter_rows()
            .map(|w| self.scale * dot(w, feature))
            .collect()
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        crate::types::argmax(&self.logits(feature))
    }

    pub fn confidence(&self, feature: &[f64]) -> ConfidenceVector {
        let sims: Vec<f64> = self.weights.iter_rows().map(|w| dot(w, feature)).collect();
        ConfidenceVector::from_softmax(scaled_softmax(&sims, self.scale))
    }

    fn check_dims(&self, d: &Dataset) -> Result<()> {
        if self.dim() != d.feature_dim() || self.num_classes() != d.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "head is {}x{}, dataset has C={} D={}",
                self.num_classes(),
                self.dim(),
                d.num_classes(),
                d.feature_dim()
            )));
        }
        Ok(())
    }
}

fn check_index(d: &Dataset, i: usize) -> Result<()> {
    if i >= d.num_samples() {
        return Err(Error::invalid(format!(
            "sample index {i} out of range for N={}",
            d.num_samples()
        )));
    }
    Ok(())
}

/// Text-expert confidence: softmax over scaled prototype similarities.
pub fn te_confidence(d: &Dataset, i: usize, scale: f64) -> Result<ConfidenceVector> {
    check_index(d, i)?;
    let f = d.feature(i);
    let sims: Vec<f64> = d.prototypes().iter_rows().map(|t| dot(t, f)).collect();
    Ok(ConfidenceVector::from_softmax(scaled_softmax(&sims, scale)))
}

/// Image-expert confidence from the current head.
pub fn ie_confidence(head: &CosineHead, d: &Dataset, i: usize) -> Result<ConfidenceVector> {
    head.check_dims(d)?;
    check_index(d, i)?;
    Ok(head.confidence(d.feature(i)))
}

/// Base-expert vector: `weight` on the observed class, zero elsewhere.
pub fn be_confidence(observed: usize, num_classes: usize, weight: f64) -> Result<Vec<f64>> {
    if observed >= num_classes {
        return Err(Error::invalid(format!(
            "observed label {observed} out of range for C={num_classes}"
        )));
    }
    check_be_weight(weight)?;
    let mut v = vec![0.0; num_classes];
    v[observed] = weight;
    Ok(v)
}

pub(crate) fn check_be_weight(weight: f64) -> Result<()> {
    if !(weight > 0.0 && weight <= 1.0) {
        return Err(Error::invalid(format!("BE weight must lie in (0, 1], got {weight}")));
    }
    Ok(())
}

/// TE confidences for every sample.
pub fn te_matrix(d: &Dataset, scale: f64) -> ConfidenceMatrix {
    let c = d.num_classes();
    let data: Vec<f64> = (0..d.num_samples())
        .into_par_iter()
        .flat_map_iter(|i| {
            let f = d.feature(i);
            let sims: Vec<f64> = d.prototypes().iter_rows().map(|t| dot(t, f)).collect();
            scaled_softmax(&sims, scale)
        })
        .collect();
    ConfidenceMatrix::from_softmax_rows(Matrix::from_vec(d.num_samples(), c, data).expect("shape"))
}

/// IE confidences for every sample.
pub fn ie_matrix(head: &CosineHead, d: &Dataset) -> Result<ConfidenceMatrix> {
    head.check_dims(d)?;
    let data: Vec<f64> = (0..d.num_samples())
        .into_par_iter()
        .flat_map_iter(|i| head.confidence(d.feature(i)).into_inner())
        .collect();
    Ok(ConfidenceMatrix::from_softmax_rows(Matrix::from_vec(
        d.num_samples(),
        d.num_classes(),
        data,
    )?))
}

/// Where an expert's confidences come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "UPPERCASE")]
pub enum ExpertKind {
    Te,
    Ie,
    Be,
    File { path: PathBuf },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::DatasetParts;
    use proptest::prelude::*;

    fn dataset(features: Vec<Vec<f64>>, prototypes: Vec<Vec<f64>>) -> Dataset {
        let n = features.len();
        let c = prototypes.len();
        Dataset::new(DatasetParts {
            num_classes: c,
            features: Matrix::from_rows(&features).unwrap(),
            prototypes: Matrix::from_rows(&prototypes).unwrap(),
            observed_labels: vec![0; n],
            true_labels: None,
        })
        .unwrap()
    }

    #[test]
    fn te_two_class_hand_value() {
        // similarities (1, 0), s = 2 -> softmax([2, 0])
        let d = dataset(vec![vec![1.0, 0.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = te_confidence(&d, 0, 2.0).unwrap();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((p.probs()[0] - expected).abs() < 1e-15);
        assert!((p.probs()[0] - 0.8808).abs() < 1e-4);
        assert!((p.probs()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn te_uniform_when_similarities_tie_or_scale_vanishes() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let d = dataset(
            vec![vec![s, s], vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let p = te_confidence(&d, 0, 25.0).unwrap();
        assert!((p.probs()[0] - 0.5).abs() < 1e-12);
        let p = te_confidence(&d, 1, 1e-300).unwrap();
        assert!((p.probs()[0] - 0.5).abs() < 1e-12);
        assert!(te_confidence(&d, 2, 1.0).is_err());
    }

    #[test]
    fn ie_matches_te_when_head_is_prototypes() {
        let d = dataset(
            vec![vec![0.6, 0.8], vec![1.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        );
        let head = CosineHead::new(d.prototypes().clone(), 7.0).unwrap();
        for i in 0..2 {
            assert_eq!(
                ie_confidence(&head, &d, i).unwrap(),
                te_confidence(&d, i, 7.0).unwrap()
            );
        }
    }

    #[test]
    fn ie_uniform_with_identical_rows() {
        let d = dataset(vec![vec![0.6, 0.8]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let head = CosineHead::new(Matrix::from_rows(&[vec![3.0, 4.0], vec![3.0, 4.0]]).unwrap(), 25.0)
            .unwrap();
        assert_eq!(ie_confidence(&head, &d, 0).unwrap().probs(), &[0.5, 0.5]);
    }

    #[test]
    fn ie_dimension_mismatch() {
        let d = dataset(vec![vec![0.6, 0.8]], vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let head = CosineHead::random(2, 3, 25.0, 0).unwrap();
        assert!(matches!(ie_confidence(&head, &d, 0), Err(Error::DimensionMismatch(_))));
        let head = CosineHead::random(3, 2, 25.0, 0).unwrap();
        assert!(matches!(ie_matrix(&head, &d), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn random_head_rows_are_unit() {
        let head = CosineHead::random(5, 16, 25.0, 3).unwrap();
        for w in head.weights().iter_rows() {
            assert!((crate::types::l2_norm(w) - 1.0).abs() < 1e-12);
        }
        assert_eq!(head, CosineHead::random(5, 16, 25.0, 3).unwrap());
        assert!(CosineHead::random(5, 16, 0.0, 3).is_err());
    }

    #[test]
    fn be_vectors() {
        assert_eq!(be_confidence(2, 4, 1.0).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(be_confidence(0, 1, 1.0).unwrap(), vec![1.0]);
        assert_eq!(be_confidence(1, 3, 0.5).unwrap(), vec![0.0, 0.5, 0.0]);
        assert!(be_confidence(3, 3, 1.0).is_err());
        assert!(be_confidence(0, 3, 0.0).is_err());
        assert!(be_confidence(0, 3, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn softmax_argmax_is_scale_invariant(
            sims in prop::collection::vec(-1.0f64..1.0, 2..12),
            s1 in 0.01f64..100.0,
            factor in 1.0f64..100.0,
        ) {
            let a = scaled_softmax(&sims, s1);
            let b = scaled_softmax(&sims, s1 * factor);
            prop_assert_eq!(crate::types::argmax(&a), crate::types::argmax(&b));
        }

        #[test]
        fn softmax_stays_finite_and_on_simplex(
            sims in prop::collection::vec(-1.0f64..1.0, 1..12),
            scale in 0.0f64..1e4,
        ) {
            let p = scaled_softmax(&sims, scale);
            prop_assert!(p.iter().all(|x| x.is_finite()));
            prop_assert!(crate::types::check_simplex(&p, 1e-9).is_ok());
        }
    }
}
