//! Class-adaptive Top-K expert consensus.
//!
//! Each epoch every auxiliary expert proposes its Top-K classes for every
//! sample, where K grows with the size of the class the sample is currently
//! assigned to. Proposals are weighted by how reliable the expert looks on
//! that sample and accumulated into a per-sample frequency row; the rectified
//! label is the row's argmax.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::check_be_weight;
use crate::metrics::group_sizes;
use crate::types::{argmax, ClassCounts, ConfidenceMatrix, FrequencyMatrix, RectifiedState};

/// How the Top-K size of a class is derived from its sample count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum KPolicy {
    /// `floor(n^(1/4))`.
    #[default]
    PowerQuarter,
    /// Fixed K per frequency group (head / medium / tail thirds).
    Step { head: usize, med: usize, tail: usize },
    /// `round(n^(1/4))`.
    Exponential,
    /// `floor(ln n)`.
    Logarithmic,
    /// Linear interpolation of n between the smallest and largest class count.
    Linear { k_min: usize, k_max: usize },
    /// Same K for every class.
    Global { k: usize },
}

impl KPolicy {
    pub const DEFAULT_STEP: KPolicy = KPolicy::Step {
        head: 8,
        med: 4,
        tail: 2,
    };
    pub const DEFAULT_LINEAR: KPolicy = KPolicy::Linear { k_min: 1, k_max: 9 };

    pub fn is_global(&self) -> bool {
        matches!(self, KPolicy::Global { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KPolicy::Step { head, med, tail } => {
                if tail == 0 || !(head >= med && med >= tail) {
                    return Err(Error::invalid(format!(
                        "step K values must satisfy head >= med >= tail >= 1, got {head}/{med}/{tail}"
                    )));
                }
            }
            KPolicy::Linear { k_min, k_max } => {
                if k_min == 0 || k_min > k_max {
                    return Err(Error::invalid(format!(
                        "linear K needs 1 <= k_min <= k_max, got {k_min}..{k_max}"
                    )));
                }
            }
            KPolicy::Global { k: 0 } => {
                return Err(Error::invalid("global K must be positive"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Class-count statistics some K forms need besides the class's own count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KContext {
    pub num_classes: usize,
    pub n_min: usize,
    pub n_max: usize,
    /// Smallest count that still counts as head.
    pub head_min: usize,
    /// Smallest count that still counts as medium.
    pub med_min: usize,
}

impl KContext {
    /// Statistics over the non-empty classes of `counts`. Group thresholds are
    /// the counts at the boundaries of the frequency-sorted groups, so equal
    /// counts always land in the same group.
    pub fn from_counts(counts: &ClassCounts) -> Self {
        let mut sorted: Vec<usize> = counts.counts.iter().copied().filter(|&n| n > 0).collect();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let c = counts.num_classes();
        let (n_min, n_max) = match (sorted.last(), sorted.first()) {
            (Some(&lo), Some(&hi)) => (lo, hi),
            _ => (1, 1),
        };
        let (head_min, med_min) = if sorted.len() < 3 {
            (0, 0)
        } else {
            let (head, med, _) = group_sizes(sorted.len());
            (sorted[head - 1], sorted[head + med - 1])
        };
        KContext {
            num_classes: c,
            n_min,
            n_max,
            head_min,
            med_min,
        }
    }
}

/// K for a class holding `n` samples, clamped to `[1, C]`.
pub fn compute_k(policy: &KPolicy, n: usize, ctx: &KContext) -> Result<usize> {
    if n == 0 {
        return Err(Error::invalid("K is undefined for an empty class"));
    }
    let nf = n as f64;
    let raw = match *policy {
        KPolicy::PowerQuarter => integer_fourth_root(n),
        KPolicy::Exponential => nf.powf(0.25).round() as usize,
        KPolicy::Logarithmic => nf.ln().floor() as usize,
        KPolicy::Linear { k_min, k_max } => {
            if ctx.n_max <= ctx.n_min {
                k_max
            } else {
                let t = (nf - ctx.n_min as f64) / (ctx.n_max - ctx.n_min) as f64;
                (t * (k_max - k_min) as f64 + k_min as f64).round() as usize
            }
        }
        KPolicy::Step { head, med, tail } => {
            if n >= ctx.head_min {
                head
            } else if n >= ctx.med_min {
                med
            } else {
                tail
            }
        }
        KPolicy::Global { k } => k,
    };
    Ok(raw.clamp(1, ctx.num_classes.max(1)))
}

/// Exact `floor(n^(1/4))`, immune to `powf` rounding at perfect powers.
fn integer_fourth_root(n: usize) -> usize {
    let mut r = (n as f64).powf(0.25) as usize;
    let pow4 = |x: usize| (x as u128).pow(4);
    while pow4(r + 1) <= n as u128 {
        r += 1;
    }
    while r > 0 && pow4(r) > n as u128 {
        r -= 1;
    }
    r
}

/// The K most confident classes of one expert's vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopKSet {
    /// Descending confidence, ascending index among ties.
    pub classes: Vec<usize>,
    pub mass: f64,
}

impl TopKSet {
    pub fn contains(&self, c: usize) -> bool {
        self.classes.contains(&c)
    }
}

pub fn topk(p: &[f64], k: usize) -> Result<TopKSet> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid(format!("K = {k} outside [1, {}]", p.len())));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    let by_conf = |&a: &usize, &b: &usize| {
        p[b].partial_cmp(&p[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    };
    if k < p.len() {
        idx.select_nth_unstable_by(k - 1, by_conf);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_conf);
    let mass = idx.iter().map(|&c| p[c]).sum();
    Ok(TopKSet { classes: idx, mass })
}

/// Top-K mass when the observed label is inside the set, otherwise 1.
pub fn reliability_weight(top: &TopKSet, observed: usize) -> f64 {
    if top.contains(observed) {
        top.mass
    } else {
        1.0
    }
}

/// The expert's confidence in `c` if `c` made its Top-K, else 0.
pub fn class_contribution(p: &[f64], top: &TopKSet, c: usize) -> f64 {
    if top.contains(c) {
        p[c]
    } else {
        0.0
    }
}

/// One expert's vector for a sample together with its Top-K set.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVote<'a> {
    pub probs: &'a [f64],
    pub top: &'a TopKSet,
}

/// Adds every expert's weighted contribution plus the base expert's
/// `be_weight` on the observed class to one frequency row.
pub fn accumulate(row: &mut [f64], votes: &[ExpertVote<'_>], observed: usize, be_weight: f64) {
    for v in votes {
        let alpha = reliability_weight(v.top, observed);
        for &c in &v.top.classes {
            row[c] += alpha * class_contribution(v.probs, v.top, c);
        }
    }
    row[observed] += be_weight;
}

/// Row-wise argmax of the frequency matrix with recounted classes and prior.
pub fn rectify(freq: &FrequencyMatrix) -> RectifiedState {
    let labels: Vec<usize> = (0..freq.num_samples()).map(|i| argmax(freq.row(i))).collect();
    RectifiedState::from_labels(labels, freq.num_classes(), freq.epoch())
}

/// Inputs to one consensus pass.
#[derive(Debug, Clone, Copy)]
pub struct ConsensusInputs<'a> {
    pub observed: &'a [usize],
    /// Active auxiliary experts, one confidence row per sample each.
    pub experts: &'a [&'a ConfidenceMatrix],
    pub policy: &'a KPolicy,
    /// Rectified labels from the previous epoch (observed labels at epoch 0).
    pub prev_labels: &'a [usize],
    /// Class counts of `prev_labels`.
    pub prev_counts: &'a ClassCounts,
    pub be_weight: f64,
}

/// The K each sample uses: the size of the class its previous rectified
/// label points to, mapped through the policy.
pub fn sample_k(inputs: &ConsensusInputs<'_>) -> Result<Vec<usize>> {
    let ctx = KContext::from_counts(inputs.prev_counts);
    let table: Vec<Option<usize>> = inputs
        .prev_counts
        .counts
        .iter()
        .map(|&n| if n == 0 { None } else { compute_k(inputs.policy, n, &ctx).ok() })
        .collect();
    inputs
        .prev_labels
        .iter()
        .map(|&y| {
            table
                .get(y)
                .copied()
                .flatten()
                .ok_or_else(|| Error::invalid(format!("previous label {y} has no samples in the class counts")))
        })
        .collect()
}

/// One epoch of consensus: accumulate every expert into `freq`, then rectify.
pub fn epoch_consensus(freq: &mut FrequencyMatrix, inputs: &ConsensusInputs<'_>) -> Result<RectifiedState> {
    let n = freq.num_samples();
    let c = freq.num_classes();
    inputs.policy.validate()?;
    check_be_weight(inputs.be_weight)?;
    if inputs.observed.len() != n || inputs.prev_labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "frequency matrix has {n} rows, labels have {} / {}",
            inputs.observed.len(),
            inputs.prev_labels.len()
        )));
    }
    if inputs.prev_counts.num_classes() != c {
        return Err(Error::DimensionMismatch(format!(
            "class counts cover {} classes, frequency matrix {c}",
            inputs.prev_counts.num_classes()
        )));
    }
    for e in inputs.experts {
        if e.num_samples() != n || e.num_classes() != c {
            return Err(Error::DimensionMismatch(format!(
                "expert matrix is {}x{}, expected {n}x{c}",
                e.num_samples(),
                e.num_classes()
            )));
        }
    }
    if let Some(&y) = inputs.observed.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("observed label {y} out of range")));
    }
    let ks = sample_k(inputs)?;
    let experts = inputs.experts;
    let observed = inputs.observed;
    let be_weight = inputs.be_weight;
    if c > 0 {
        freq.values_mut()
            .as_mut_slice()
            .par_chunks_mut(c)
            .enumerate()
            .try_for_each(|(i, row)| -> Result<()> {
                let tops: Vec<TopKSet> = experts
                    .iter()
                    .map(|e| topk(e.row(i), ks[i]))
                    .collect::<Result<_>>()?;
                let votes: Vec<ExpertVote<'_>> = experts
                    .iter()
                    .zip(&tops)
                    .map(|(e, top)| ExpertVote {
                        probs: e.row(i),
                        top,
                    })
                    .collect();
                accumulate(row, &votes, observed[i], be_weight);
                Ok(())
            })?;
    }
    freq.advance_epoch();
    Ok(rectify(freq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Matrix;
    use proptest::prelude::*;

    fn ctx(counts: &[usize]) -> KContext {
        KContext::from_counts(&ClassCounts {
            counts: counts.to_vec(),
            epoch: 0,
        })
    }

    fn big_ctx() -> KContext {
        KContext {
            num_classes: 1000,
            n_min: 1,
            n_max: 10_000,
            head_min: 0,
            med_min: 0,
        }
    }

    #[test]
    fn power_quarter_values() {
        let q = KPolicy::PowerQuarter;
        assert_eq!(compute_k(&q, 1, &big_ctx()).unwrap(), 1);
        assert_eq!(compute_k(&q, 10_000, &big_ctx()).unwrap(), 10);
        assert_eq!(compute_k(&q, 9_999, &big_ctx()).unwrap(), 9);
        // 500^0.25 = 4.728...
        assert_eq!(compute_k(&q, 500, &big_ctx()).unwrap(), 4);
        assert_eq!(compute_k(&q, 81, &big_ctx()).unwrap(), 3);
        assert!(compute_k(&q, 0, &big_ctx()).is_err());
    }

    #[test]
    fn k_is_clamped_to_class_count() {
        let c = KContext {
            num_classes: 3,
            ..big_ctx()
        };
        assert_eq!(compute_k(&KPolicy::PowerQuarter, 10_000, &c).unwrap(), 3);
        assert_eq!(compute_k(&KPolicy::Global { k: 8 }, 5, &c).unwrap(), 3);
        assert_eq!(compute_k(&KPolicy::Logarithmic, 2, &c).unwrap(), 1);
    }

    #[test]
    fn linear_maps_extremes() {
        let c = ctx(&[500, 300, 120, 50]);
        let lin = KPolicy::DEFAULT_LINEAR;
        assert_eq!(compute_k(&lin, 50, &c).unwrap(), 1);
        assert_eq!(compute_k(&lin, 500, &c).unwrap(), 4);
        let wide = KContext {
            num_classes: 100,
            ..c
        };
        assert_eq!(compute_k(&lin, 500, &wide).unwrap(), 9);
        assert_eq!(compute_k(&lin, 50, &wide).unwrap(), 1);
        // (275 - 50) / 450 * 8 + 1 = 5
        assert_eq!(compute_k(&lin, 275, &wide).unwrap(), 5);
    }

    #[test]
    fn step_groups_follow_sorted_thirds() {
        let counts = [500, 400, 300, 200, 100, 50];
        let c = KContext {
            num_classes: 20,
            ..ctx(&counts)
        };
        let step = KPolicy::DEFAULT_STEP;
        let ks: Vec<usize> = counts.iter().map(|&n| compute_k(&step, n, &c).unwrap()).collect();
        assert_eq!(ks, vec![8, 8, 4, 4, 2, 2]);
        let flat = KContext {
            num_classes: 20,
            ..ctx(&[7, 7, 7, 7])
        };
        assert_eq!(compute_k(&step, 7, &flat).unwrap(), 8);
    }

    #[test]
    fn policy_validation() {
        assert!(KPolicy::Global { k: 0 }.validate().is_err());
        assert!(KPolicy::Linear { k_min: 3, k_max: 2 }.validate().is_err());
        assert!(KPolicy::Step { head: 2, med: 4, tail: 1 }.validate().is_err());
        assert!(KPolicy::DEFAULT_STEP.validate().is_ok());
    }

    #[test]
    fn topk_examples() {
        let p = [0.5, 0.3, 0.2];
        let t = topk(&p, 2).unwrap();
        assert_eq!(t.classes, vec![0, 1]);
        assert!((t.mass - 0.8).abs() < 1e-15);
        let full = topk(&p, 3).unwrap();
        assert!((full.mass - 1.0).abs() < 1e-15);
        assert_eq!(topk(&[0.25; 4], 1).unwrap().classes, vec![0]);
        assert_eq!(topk(&[0.1, 0.4, 0.1, 0.4], 3).unwrap().classes, vec![1, 3, 0]);
        assert!(topk(&p, 0).is_err());
        assert!(topk(&p, 4).is_err());
    }

    #[test]
    fn reliability_and_contribution() {
        let p = [0.5, 0.3, 0.2];
        let t2 = topk(&p, 2).unwrap();
        assert!((reliability_weight(&t2, 0) - 0.8).abs() < 1e-15);
        assert_eq!(reliability_weight(&t2, 2), 1.0);
        let t3 = topk(&p, 3).unwrap();
        for y in 0..3 {
            assert!((reliability_weight(&t3, y) - 1.0).abs() < 1e-15);
        }
        let t1 = topk(&p, 1).unwrap();
        assert_eq!(
            (0..3).map(|c| class_contribution(&p, &t1, c)).collect::<Vec<_>>(),
            vec![0.5, 0.0, 0.0]
        );
        assert_eq!(
            (0..3).map(|c| class_contribution(&p, &t3, c)).collect::<Vec<_>>(),
            p.to_vec()
        );
        let z = [1.0, 0.0, 0.0];
        let tz = topk(&z, 2).unwrap();
        assert_eq!(class_contribution(&z, &tz, 1), 0.0);
    }

    #[test]
    fn accumulate_hand_example() {
        let te = [0.6, 0.3, 0.1];
        let ie = [0.2, 0.1, 0.7];
        let (t_te, t_ie) = (topk(&te, 1).unwrap(), topk(&ie, 1).unwrap());
        let mut row = vec![0.0, 0.0, 1.0];
        accumulate(
            &mut row,
            &[
                ExpertVote { probs: &te, top: &t_te },
                ExpertVote { probs: &ie, top: &t_ie },
            ],
            2,
            1.0,
        );
        assert!((row[0] - 0.6).abs() < 1e-15);
        assert_eq!(row[1], 0.0);
        assert!((row[2] - 2.49).abs() < 1e-15);
        assert_eq!(argmax(&row), 2);
    }

    #[test]
    fn accumulate_uniform_full_k() {
        let c = 4;
        let u = vec![0.25; c];
        let t = topk(&u, c).unwrap();
        let mut row = vec![0.0; c];
        let v = ExpertVote { probs: &u, top: &t };
        accumulate(&mut row, &[v, v], 1, 1.0);
        assert_eq!(row, vec![0.5, 1.5, 0.5, 0.5]);
    }

    #[test]
    fn rectify_examples() {
        let f = FrequencyMatrix::from_matrix(
            Matrix::from_rows(&[vec![0.6, 0.0, 2.49], vec![0.0, 0.0, 0.0]]).unwrap(),
            1,
        )
        .unwrap();
        assert_eq!(rectify(&f).labels, vec![2, 0]);
        let f = FrequencyMatrix::from_matrix(
            Matrix::from_rows(&[vec![2.0, 1.0], vec![3.0, 0.5], vec![0.0, 1.0]]).unwrap(),
            1,
        )
        .unwrap();
        let s = rectify(&f);
        assert_eq!(s.counts.counts, vec![2, 1]);
        assert!((s.prior[0] - 2.0 / 3.0).abs() < 1e-15 && (s.prior[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    fn one_hot_rows(labels: &[usize], c: usize, peak: f64) -> ConfidenceMatrix {
        let rest = (1.0 - peak) / (c - 1) as f64;
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&y| (0..c).map(|j| if j == y { peak } else { rest }).collect())
            .collect();
        ConfidenceMatrix::new(Matrix::from_rows(&rows).unwrap(), 1e-9).unwrap()
    }

    fn run_epochs(observed: &[usize], experts: &[&ConfidenceMatrix], c: usize, epochs: usize, be_weight: f64) -> Vec<RectifiedState> {
        let mut f = FrequencyMatrix::from_observed(observed, c, be_weight);
        let mut prev = RectifiedState::from_labels(observed.to_vec(), c, 0);
        let mut out = Vec::new();
        for _ in 0..epochs {
            let s = epoch_consensus(
                &mut f,
                &ConsensusInputs {
                    observed,
                    experts,
                    policy: &KPolicy::PowerQuarter,
                    prev_labels: &prev.labels,
                    prev_counts: &prev.counts,
                    be_weight,
                },
            )
            .unwrap();
            out.push(s.clone());
            prev = s;
        }
        out
    }

    #[test]
    fn unanimous_experts_keep_observed_labels() {
        let observed = vec![0, 1, 2, 2, 1, 0, 3];
        let echo = one_hot_rows(&observed, 4, 0.97);
        for s in run_epochs(&observed, &[&echo, &echo], 4, 3, 1.0) {
            assert_eq!(s.labels, observed);
        }
    }

    #[test]
    fn oracle_experts_correct_labels_within_two_epochs() {
        let truth = vec![0, 1, 2, 3, 0, 1, 2, 3];
        let observed = vec![1, 1, 2, 0, 0, 3, 2, 3];
        let oracle = one_hot_rows(&truth, 4, 0.99);
        let states = run_epochs(&observed, &[&oracle, &oracle], 4, 2, 1.0);
        assert_eq!(states[0].labels, observed, "first epoch cannot overturn BE");
        assert_eq!(states[1].labels, truth);
    }

    #[test]
    fn weak_experts_cannot_move_labels_in_one_epoch() {
        let observed = vec![0, 1, 2, 3, 4];
        let weak = one_hot_rows(&[4, 3, 1, 0, 2], 5, 0.24);
        let s = &run_epochs(&observed, &[&weak, &weak], 5, 1, 1.0)[0];
        assert_eq!(s.labels, observed);
    }

    #[test]
    fn epoch_consensus_checks_shapes() {
        let observed = vec![0, 1];
        let e = one_hot_rows(&[0, 1, 1], 2, 0.9);
        let prev = RectifiedState::from_labels(observed.clone(), 2, 0);
        let mut f = FrequencyMatrix::from_observed(&observed, 2, 1.0);
        let r = epoch_consensus(
            &mut f,
            &ConsensusInputs {
                observed: &observed,
                experts: &[&e],
                policy: &KPolicy::PowerQuarter,
                prev_labels: &prev.labels,
                prev_counts: &prev.counts,
                be_weight: 1.0,
            },
        );
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    proptest! {
        #[test]
        fn rectified_labels_are_row_argmax(
            rows in prop::collection::vec(prop::collection::vec(prop::sample::select(vec![0.0, 0.5, 1.0, 1.5, 2.49]), 3), 1..12)
        ) {
            let f = FrequencyMatrix::from_matrix(Matrix::from_rows(&rows).unwrap(), 0).unwrap();
            let s = rectify(&f);
            for (row, &label) in rows.iter().zip(&s.labels) {
                let mut best = 0;
                for j in 0..row.len() {
                    if row[j] > row[best] { best = j; }
                }
                prop_assert_eq!(label, best);
            }
            prop_assert_eq!(s.counts.total(), rows.len());
        }

        #[test]
        fn non_global_policies_are_monotone(a in 1usize..100_000, b in 1usize..100_000, c in 2usize..200) {
            let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
            let context = KContext { num_classes: c, ..ctx(&[100_000, 5_000, 700, 90, 3, 1]) };
            for policy in [
                KPolicy::PowerQuarter,
                KPolicy::Exponential,
                KPolicy::Logarithmic,
                KPolicy::DEFAULT_LINEAR,
                KPolicy::DEFAULT_STEP,
            ] {
                prop_assert!(compute_k(&policy, hi, &context).unwrap() >= compute_k(&policy, lo, &context).unwrap());
            }
        }

        #[test]
        fn topk_mass_bounds(raw in prop::collection::vec(0.0f64..1.0, 1..10), kf in 0.0f64..1.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let p: Vec<f64> = raw.iter().map(|x| (x + 1e-9 / raw.len() as f64) / s).collect();
            let k = 1 + ((kf * p.len() as f64) as usize).min(p.len() - 1);
            let t = topk(&p, k).unwrap();
            prop_assert_eq!(t.classes.len(), k);
            prop_assert!(t.mass >= k as f64 / p.len() as f64 - 1e-9 && t.mass <= 1.0 + 1e-9);
            let min_in = t.classes.iter().map(|&c| p[c]).fold(f64::INFINITY, f64::min);
            for c in (0..p.len()).filter(|c| !t.contains(*c)) {
                prop_assert!(p[c] <= min_in);
            }
        }
    }
}
