//! Long-tailed class profiles, clustered synthetic features and label noise
//! injected through a known transition matrix.

use num::{BigInt, BigRational, One, Zero};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::types::{normalize, ClassCounts, Dataset, DatasetParts, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub imbalance_factor: f64,
    pub max_per_class: usize,
    pub num_classes: usize,
}

/// Exponentially decaying class sizes `n_1 * IF^(-(c-1)/(C-1))`, rounded,
/// with a floor of one sample.
pub fn longtail_profile(spec: &ImbalanceSpec) -> Result<ClassCounts> {
    let ImbalanceSpec {
        imbalance_factor: ratio,
        max_per_class: n1,
        num_classes: c,
    } = *spec;
    if c == 0 {
        return Err(Error::invalid("imbalance profile needs at least one class"));
    }
    if n1 == 0 {
        return Err(Error::invalid("max_per_class must be positive"));
    }
    if ratio < 1.0 || !ratio.is_finite() {
        return Err(Error::invalid(format!("imbalance factor must be >= 1, got {ratio}")));
    }
    let counts = (0..c)
        .map(|k| {
            if c == 1 {
                return n1;
            }
            let exponent = -(k as f64) / (c - 1) as f64;
            ((n1 as f64 * ratio.powf(exponent)).round() as usize).max(1)
        })
        .collect();
    Ok(ClassCounts { counts, epoch: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Flip uniformly to any other class.
    SymmetricUniform,
    /// Flip to the next class index, circularly.
    AsymmetricPairflip,
    /// Flip towards other classes in proportion to their size.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    fn check(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::invalid(format!(
                "noise rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Label transition matrix `T[i][j] = Pr(observed = j | true = i)`.
///
/// Kept in parametric form so entries can be read both as `f64` for sampling
/// and as exact rationals for checking row sums.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    kind: NoiseKind,
    rate: f64,
    class_sizes: Vec<usize>,
}

impl TransitionMatrix {
    /// `class_sizes` weights the joint kind and fixes C for all kinds.
    pub fn new(kind: NoiseKind, rate: f64, class_sizes: &[usize]) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("noise rate must lie in [0, 1), got {rate}")));
        }
        let c = class_sizes.len();
        if c == 0 {
            return Err(Error::invalid("transition matrix needs at least one class"));
        }
        if rate > 0.0 && c < 2 {
            return Err(Error::invalid("label noise needs at least two classes"));
        }
        if rate > 0.0 && kind == NoiseKind::Joint {
            let total: usize = class_sizes.iter().sum();
            if let Some(i) = (0..c).find(|&i| total == class_sizes[i]) {
                return Err(Error::invalid(format!(
                    "joint noise from class {i}: every other class is empty"
                )));
            }
        }
        Ok(TransitionMatrix {
            kind,
            rate,
            class_sizes: class_sizes.to_vec(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_sizes.len()
    }

    /// Exact value of `T[i][j]`, treating the rate as the exact binary
    /// fraction stored in the `f64`.
    pub fn entry_exact(&self, i: usize, j: usize) -> BigRational {
        let c = self.num_classes();
        let eta = BigRational::from_float(self.rate).expect("finite noise rate");
        if c == 1 {
            return BigRational::one();
        }
        if i == j {
            return BigRational::one() - eta;
        }
        match self.kind {
            NoiseKind::SymmetricUniform => eta / BigInt::from(c - 1),
            NoiseKind::AsymmetricPairflip => {
                if j == (i + 1) % c {
                    eta
                } else {
                    BigRational::zero()
                }
            }
            NoiseKind::Joint => {
                let others: usize = self.others_total(i);
                if others == 0 {
                    return BigRational::zero();
                }
                eta * BigRational::new(self.class_sizes[j].into(), others.into())
            }
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        let c = self.num_classes();
        if c == 1 {
            return 1.0;
        }
        if i == j {
            return 1.0 - self.rate;
        }
        match self.kind {
            NoiseKind::SymmetricUniform => self.rate / (c - 1) as f64,
            NoiseKind::AsymmetricPairflip => {
                if j == (i + 1) % c {
                    self.rate
                } else {
                    0.0
                }
            }
            NoiseKind::Joint => match self.others_total(i) {
                0 => 0.0,
                others => self.rate * self.class_sizes[j] as f64 / others as f64,
            },
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.num_classes()).map(|j| self.entry(i, j)).collect()
    }

    /// Exact sum of row `i`.
    pub fn row_sum_exact(&self, i: usize) -> BigRational {
        (0..self.num_classes())
            .map(|j| self.entry_exact(i, j))
            .fold(BigRational::zero(), |a, b| a + b)
    }

    fn others_total(&self, i: usize) -> usize {
        self.class_sizes.iter().sum::<usize>() - self.class_sizes[i]
    }

    /// Draws the observed label for a sample of true class `i` from `u ~ U[0,1)`
    /// for the keep/flip decision and `v ~ U[0,1)` for the flip target.
    fn draw(&self, i: usize, u: f64, v: f64) -> usize {
        let c = self.num_classes();
        if c == 1 || u >= self.rate {
            return i;
        }
        match self.kind {
            NoiseKind::SymmetricUniform => {
                let k = ((v * (c - 1) as f64) as usize).min(c - 2);
                if k >= i {
                    k + 1
                } else {
                    k
                }
            }
            NoiseKind::AsymmetricPairflip => (i + 1) % c,
            NoiseKind::Joint => {
                let others = self.others_total(i) as f64;
                let target = v * others;
                let mut acc = 0.0;
                let mut last = i;
                for j in (0..c).filter(|&j| j != i) {
                    if self.class_sizes[j] == 0 {
                        continue;
                    }
                    acc += self.class_sizes[j] as f64;
                    last = j;
                    if target < acc {
                        return j;
                    }
                }
                last
            }
        }
    }
}

/// Replaces observed labels with draws from the transition matrix applied to
/// the true labels. True labels and features are untouched.
pub fn inject_noise(d: &Dataset, spec: &NoiseSpec) -> Result<Dataset> {
    spec.check()?;
    let truth = d.require_truth()?;
    let sizes = ClassCounts::from_labels(truth, d.num_classes(), 0).counts;
    let t = TransitionMatrix::new(spec.kind, spec.rate, &sizes)?;
    let observed: Vec<usize> = truth
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut rng = stream(spec.seed, Domain::Noise, i as u64);
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            t.draw(y, u, v)
        })
        .collect();
    Ok(d.with_observed_labels(observed)?)
}

/// Fraction of samples whose observed label differs from the true label.
pub fn empirical_noise_rate(d: &Dataset) -> Result<f64> {
    let truth = d.require_truth()?;
    Ok(mismatch_rate(d.observed_labels(), truth))
}

pub(crate) fn mismatch_rate(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let wrong = a.iter().zip(b).filter(|(x, y)| x != y).count();
    wrong as f64 / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub feature_dim: usize,
    pub spread: f64,
    pub seed: u64,
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random unit prototypes and one unit-normalized noisy copy of its class
/// prototype per sample. Samples are laid out class by class; observed labels
/// start out equal to the true labels.
pub fn synth_features(counts: &ClassCounts, spec: &ClusterSpec) -> Result<Dataset> {
    if spec.feature_dim < 2 {
        return Err(Error::invalid(format!(
            "feature dimension must be at least 2, got {}",
            spec.feature_dim
        )));
    }
    if spec.spread <= 0.0 || !spec.spread.is_finite() {
        return Err(Error::invalid(format!(
            "intra-class spread must be positive, got {}",
            spec.spread
        )));
    }
    let c = counts.num_classes();
    if c == 0 || counts.total() == 0 {
        return Err(Error::invalid("class counts describe an empty dataset"));
    }
    let d = spec.feature_dim;
    let mut prototypes = Matrix::zeros(c, d);
    for k in 0..c {
        let mut rng = stream(spec.seed, Domain::Prototype, k as u64);
        let mut v = gaussian_vec(&mut rng, d);
        normalize(&mut v);
        prototypes.row_mut(k).copy_from_slice(&v);
    }
    let labels: Vec<usize> = counts
        .counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
        .collect();
    let rows: Vec<f64> = labels
        .par_iter()
        .enumerate()
        .flat_map_iter(|(i, &y)| {
            let mut rng = stream(spec.seed, Domain::Feature, i as u64);
            let mut v: Vec<f64> = prototypes
                .row(y)
                .iter()
                .map(|&p| {
                    let z: f64 = rng.sample(StandardNormal);
                    p + spec.spread * z
                })
                .collect();
            normalize(&mut v);
            v
        })
        .collect();
    let features = Matrix::from_vec(labels.len(), d, rows)?;
    Ok(Dataset::new(DatasetParts {
        num_classes: c,
        features,
        prototypes,
        observed_labels: labels.clone(),
        true_labels: Some(labels),
    })?)
}
