//! Literal, loop-by-loop transcription of the frequency update used as an
//! independent reference for the consensus module. Nothing here calls into
//! `consensus`; Top-K membership, K selection, reliability weights and the
//! argmax are all recomputed from scratch.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::consensus::{epoch_consensus, ConsensusInputs, KPolicy};
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};
use crate::types::{ClassCounts, ConfidenceMatrix, FrequencyMatrix, Matrix, RectifiedState};

pub const MAX_SAMPLES: usize = 50;
pub const MAX_CLASSES: usize = 10;

/// A small consensus problem: observed labels plus every expert's
/// confidences for every epoch (`confidences[epoch][expert][sample][class]`).
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInstance {
    pub num_classes: usize,
    pub observed: Vec<usize>,
    pub confidences: Vec<Vec<Vec<Vec<f64>>>>,
    pub policy: KPolicy,
    pub be_weight: f64,
}

/// Number of classes that outrank `c` in `p` (higher confidence, or equal
/// confidence and a lower index).
fn rank_of(p: &[f64], c: usize) -> usize {
    let mut r = 0;
    for j in 0..p.len() {
        if p[j] > p[c] || (p[j] == p[c] && j < c) {
            r += 1;
        }
    }
    r
}

fn in_top(p: &[f64], c: usize, k: usize) -> bool {
    rank_of(p, c) < k
}

fn oracle_k(policy: &KPolicy, counts: &[usize], class: usize) -> usize {
    let c = counts.len();
    let n = counts[class];
    let mut nonempty: Vec<usize> = Vec::new();
    for &x in counts {
        if x > 0 {
            nonempty.push(x);
        }
    }
    let k = match *policy {
        KPolicy::PowerQuarter => {
            let mut r = 0;
            while (r + 1) * (r + 1) * (r + 1) * (r + 1) <= n {
                r += 1;
            }
            r
        }
        KPolicy::Exponential => (n as f64).sqrt().sqrt().round() as usize,
        KPolicy::Logarithmic => {
            // largest r with e^r <= n
            let mut r = 0usize;
            while ((r + 1) as f64).exp() <= n as f64 {
                r += 1;
            }
            r
        }
        KPolicy::Linear { k_min, k_max } => {
            let lo = *nonempty.iter().min().unwrap();
            let hi = *nonempty.iter().max().unwrap();
            if hi == lo {
                k_max
            } else {
                let t = (n - lo) as f64 / (hi - lo) as f64;
                (k_min as f64 + t * (k_max - k_min) as f64).round() as usize
            }
        }
        KPolicy::Step { head, med, tail } => {
            let m = nonempty.len();
            if m < 3 {
                head
            } else {
                // how many non-empty classes are strictly larger than this one
                let larger = nonempty.iter().filter(|&&x| x > n).count();
                let head_size = m.div_ceil(3);
                let med_size = (m - head_size).div_ceil(2);
                if larger < head_size {
                    head
                } else if larger < head_size + med_size {
                    med
                } else {
                    tail
                }
            }
        }
        KPolicy::Global { k } => k,
    };
    k.max(1).min(c)
}

/// Frequency matrix after all epochs of `inst`, computed without shortcuts.
pub fn brute_force_frequency(inst: &OracleInstance) -> Result<FrequencyMatrix> {
    let n = inst.observed.len();
    let c = inst.num_classes;
    if n > MAX_SAMPLES || c > MAX_CLASSES {
        return Err(Error::SizeGuard(format!(
            "oracle handles N <= {MAX_SAMPLES}, C <= {MAX_CLASSES}; got N={n}, C={c}"
        )));
    }
    let mut f = vec![vec![0.0f64; c]; n];
    for i in 0..n {
        f[i][inst.observed[i]] = inst.be_weight;
    }
    let mut labels = inst.observed.clone();
    for epoch in &inst.confidences {
        let mut counts = vec![0usize; c];
        for &y in &labels {
            counts[y] += 1;
        }
        for i in 0..n {
            let k = oracle_k(&inst.policy, &counts, labels[i]);
            let y_obs = inst.observed[i];
            for expert in epoch {
                let p = &expert[i];
                let alpha = if in_top(p, y_obs, k) {
                    let mut mass = 0.0;
                    for j in 0..c {
                        if in_top(p, j, k) {
                            mass += p[j];
                        }
                    }
                    mass
                } else {
                    1.0
                };
                for cls in 0..c {
                    let g = if in_top(p, cls, k) { p[cls] } else { 0.0 };
                    f[i][cls] += alpha * g;
                }
            }
            f[i][y_obs] += inst.be_weight;
        }
        for i in 0..n {
            let mut best = 0;
            for j in 1..c {
                if f[i][j] > f[i][best] {
                    best = j;
                }
            }
            labels[i] = best;
        }
    }
    let rows: Vec<f64> = f.into_iter().flatten().collect();
    FrequencyMatrix::from_matrix(Matrix::from_vec(n, c, rows)?, inst.confidences.len())
}

/// Runs the production path (`epoch_consensus`) on the same instance.
pub fn consensus_frequency(inst: &OracleInstance) -> Result<FrequencyMatrix> {
    let c = inst.num_classes;
    let mut freq = FrequencyMatrix::from_observed(&inst.observed, c, inst.be_weight);
    let mut state = RectifiedState::from_labels(inst.observed.clone(), c, 0);
    for epoch in &inst.confidences {
        let mats: Vec<ConfidenceMatrix> = epoch
            .iter()
            .map(|rows| ConfidenceMatrix::new(Matrix::from_rows(rows)?, 1e-9))
            .collect::<Result<_>>()?;
        let refs: Vec<&ConfidenceMatrix> = mats.iter().collect();
        let counts: ClassCounts = state.counts.clone();
        state = epoch_consensus(
            &mut freq,
            &ConsensusInputs {
                observed: &inst.observed,
                experts: &refs,
                policy: &inst.policy,
                prev_labels: &state.labels,
                prev_counts: &counts,
                be_weight: inst.be_weight,
            },
        )?;
    }
    Ok(freq)
}

fn random_probs(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    // a quarter of rows are coarsely quantized so that ties occur
    let coarse = rng.random_bool(0.25);
    let raw: Vec<f64> = (0..c)
        .map(|_| {
            if coarse {
                rng.random_range(0..4) as f64
            } else {
                rng.random::<f64>()
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        return vec![1.0 / c as f64; c];
    }
    raw.iter().map(|x| x / s).collect()
}

fn random_policy(rng: &mut ChaCha8Rng, form: usize) -> KPolicy {
    match form % 6 {
        0 => KPolicy::PowerQuarter,
        1 => {
            let tail = rng.random_range(1..=2);
            let med = rng.random_range(tail..=3);
            KPolicy::Step {
                head: rng.random_range(med..=3),
                med,
                tail,
            }
        }
        2 => KPolicy::Exponential,
        3 => KPolicy::Logarithmic,
        4 => {
            let k_min = rng.random_range(1..=2);
            KPolicy::Linear {
                k_min,
                k_max: rng.random_range(k_min..=3),
            }
        }
        _ => KPolicy::Global {
            k: rng.random_range(1..=3),
        },
    }
}

/// A random instance with `N <= 20`, `C <= 5`, K at most 3, one to three
/// epochs and one or two auxiliary experts. The policy form cycles with
/// `index` so every form is covered.
pub fn random_instance(seed: u64, index: u64) -> OracleInstance {
    let mut rng = stream(seed, Domain::Oracle, index);
    let c = rng.random_range(2..=5);
    let n = rng.random_range(1..=20);
    let epochs = rng.random_range(1..=3);
    let experts = rng.random_range(1..=2);
    let observed = (0..n).map(|_| rng.random_range(0..c)).collect();
    let confidences = (0..epochs)
        .map(|_| {
            (0..experts)
                .map(|_| (0..n).map(|_| random_probs(&mut rng, c)).collect())
                .collect()
        })
        .collect();
    let be_weight = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
    OracleInstance {
        num_classes: c,
        observed,
        confidences,
        policy: random_policy(&mut rng, index as usize),
        be_weight,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

pub const ORACLE_TOLERANCE: f64 = 1e-12;

/// Compares the consensus module against the oracle on `instances` random
/// problems.
pub fn oracle_equivalence(instances: usize, seed: u64) -> Result<OracleReport> {
    let mut max_abs_diff = 0.0f64;
    for k in 0..instances as u64 {
        let inst = random_instance(seed, k);
        let a = brute_force_frequency(&inst)?;
        let b = consensus_frequency(&inst)?;
        for (x, y) in a.values().as_slice().iter().zip(b.values().as_slice()) {
            max_abs_diff = max_abs_diff.max((x - y).abs());
        }
    }
    Ok(OracleReport {
        instances,
        max_abs_diff,
        tolerance: ORACLE_TOLERANCE,
        pass: max_abs_diff <= ORACLE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_guard() {
        let inst = OracleInstance {
            num_classes: 11,
            observed: vec![0],
            confidences: vec![],
            policy: KPolicy::PowerQuarter,
            be_weight: 1.0,
        };
        assert!(matches!(brute_force_frequency(&inst), Err(Error::SizeGuard(_))));
    }

    #[test]
    fn echoing_expert_gives_epoch_multiples() {
        let observed = vec![0, 2, 1, 2];
        let echo: Vec<Vec<f64>> = observed
            .iter()
            .map(|&y| (0..3).map(|j| if j == y { 1.0 } else { 0.0 }).collect())
            .collect();
        for epochs in 1..4 {
            let inst = OracleInstance {
                num_classes: 3,
                observed: observed.clone(),
                confidences: vec![vec![echo.clone()]; epochs],
                policy: KPolicy::Global { k: 2 },
                be_weight: 1.0,
            };
            let f = brute_force_frequency(&inst).unwrap();
            for (i, &y) in observed.iter().enumerate() {
                for j in 0..3 {
                    let expected = if j == y { 1.0 + 2.0 * epochs as f64 } else { 0.0 };
                    assert_eq!(f.row(i)[j], expected);
                }
            }
        }
    }

    #[test]
    fn uniform_full_k_closed_form() {
        // per epoch: 2/C from the two experts on every class, plus 1 on the
        // observed class; the initial one-hot sits on top
        let c = 4;
        let observed = vec![3, 0, 1];
        let uniform = vec![vec![1.0 / c as f64; c]; observed.len()];
        for e in 1..=3usize {
            let inst = OracleInstance {
                num_classes: c,
                observed: observed.clone(),
                confidences: vec![vec![uniform.clone(), uniform.clone()]; e],
                policy: KPolicy::Global { k: c },
                be_weight: 1.0,
            };
            let f = brute_force_frequency(&inst).unwrap();
            let ef = e as f64;
            for (i, &y) in observed.iter().enumerate() {
                for j in 0..c {
                    let gained = f.row(i)[j] - if j == y { 1.0 } else { 0.0 };
                    let expected = if j == y { ef * (2.0 / c as f64 + 1.0) } else { ef * 2.0 / c as f64 };
                    assert!((gained - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn disjoint_top_sets_only_touch_their_classes() {
        // observed 0; TE top-1 is class 1, IE top-1 is class 2
        let inst = OracleInstance {
            num_classes: 4,
            observed: vec![0],
            confidences: vec![vec![
                vec![vec![0.1, 0.6, 0.2, 0.1]],
                vec![vec![0.1, 0.2, 0.5, 0.2]],
            ]],
            policy: KPolicy::Global { k: 1 },
            be_weight: 1.0,
        };
        let f = brute_force_frequency(&inst).unwrap();
        assert_eq!(f.row(0), &[2.0, 0.6, 0.5, 0.0]);
        let g = consensus_frequency(&inst).unwrap();
        assert_eq!(f.row(0), g.row(0));
    }

    #[test]
    fn k_transcription_agrees_with_hand_values() {
        assert_eq!(oracle_k(&KPolicy::PowerQuarter, &[10_000, 1, 500], 0), 3);
        assert_eq!(oracle_k(&KPolicy::PowerQuarter, &[16, 1, 500], 0), 2);
        assert_eq!(oracle_k(&KPolicy::Logarithmic, &[20, 1, 2], 0), 2);
        assert_eq!(oracle_k(&KPolicy::Logarithmic, &[2, 1, 2], 0), 1);
    }

    #[test]
    fn equivalence_on_a_few_hundred_instances() {
        let r = oracle_equivalence(300, 11).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
