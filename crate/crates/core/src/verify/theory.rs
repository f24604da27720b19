//! Monte Carlo checks of the two consensus guarantees.
//!
//! Synthetic experts draw `q ~ Dirichlet(a, ..., a)` and report
//! `p = (1 - delta) q + delta e_y`, so every expert has a mean advantage of
//! exactly `delta` on the true class over the uniform baseline of `q`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

/// Trial counts below this are allowed but flagged as statistically weak.
pub const MIN_TRIALS: usize = 1000;

/// How a synthetic expert scores its classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertModel {
    /// Mass moved onto the true class, in `[0, 1]`.
    pub advantage: f64,
    /// Symmetric Dirichlet concentration of the remaining mass.
    pub concentration: f64,
}

impl ExpertModel {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.advantage) {
            return Err(Error::invalid(format!("advantage must lie in [0, 1], got {}", self.advantage)));
        }
        if self.concentration <= 0.0 || !self.concentration.is_finite() {
            return Err(Error::invalid(format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        Ok(())
    }
}

/// Reusable sampler for one expert model.
struct ExpertSampler {
    model: ExpertModel,
    gamma: Option<Gamma<f64>>,
}

impl ExpertSampler {
    fn new(model: ExpertModel) -> Result<Self> {
        model.validate()?;
        let gamma = if model.concentration == 1.0 {
            None
        } else {
            Some(Gamma::new(model.concentration, 1.0).map_err(|e| Error::invalid(e.to_string()))?)
        };
        Ok(ExpertSampler { model, gamma })
    }

    /// Writes one confidence vector for true class `y` into `out`.
    fn draw(&self, rng: &mut ChaCha8Rng, y: usize, out: &mut [f64]) {
        let mut sum = 0.0;
        for x in out.iter_mut() {
            *x = match &self.gamma {
                None => Exp1.sample(rng),
                Some(g) => g.sample(rng),
            };
            sum += *x;
        }
        let d = self.model.advantage;
        let uniform = (1.0 - d) / out.len() as f64;
        for x in out.iter_mut() {
            *x = if sum > 0.0 { *x * (1.0 - d) / sum } else { uniform };
        }
        out[y] += d;
    }
}

/// Classes ranked strictly ahead of `c` (higher confidence, or equal
/// confidence and lower index).
fn rank(p: &[f64], c: usize) -> usize {
    p.iter()
        .enumerate()
        .filter(|&(j, &x)| x > p[c] || (x == p[c] && j < c))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremTrialConfig {
    pub trials: usize,
    pub num_classes: usize,
    pub k: usize,
    pub expert: ExpertModel,
    pub seed: u64,
}

impl Default for TheoremTrialConfig {
    fn default() -> Self {
        TheoremTrialConfig {
            trials: 1_000_000,
            num_classes: 10,
            k: 2,
            expert: ExpertModel {
                advantage: 0.2,
                concentration: 1.0,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremEstimate {
    pub trials: usize,
    /// Fraction of trials in which the true class is in both Top-K sets.
    pub p_true: f64,
    /// Largest such fraction over the wrong classes.
    pub p_wrong_max: f64,
    /// `p_true / p_wrong_max`, `+inf` when no wrong class was ever shared.
    pub ratio: f64,
    pub below_min_trials: bool,
}

/// Estimates how much more often two independent experts agree on the true
/// class than on any single wrong class. Wrong classes are tracked by their
/// offset from the true class, which cycles through all classes, so the
/// index tie-break does not favour any offset.
pub fn mc_theorem1(cfg: &TheoremTrialConfig) -> Result<TheoremEstimate> {
    let c = cfg.num_classes;
    if c < 2 || cfg.k == 0 || cfg.k > c {
        return Err(Error::invalid(format!("need C >= 2 and 1 <= K <= C, got C={c}, K={}", cfg.k)));
    }
    if cfg.trials == 0 {
        return Err(Error::invalid("at least one trial is required"));
    }
    let sampler = ExpertSampler::new(cfg.expert)?;
    let mut shared = vec![0u64; c];
    let (mut a, mut b) = (vec![0.0; c], vec![0.0; c]);
    for t in 0..cfg.trials {
        let mut rng = stream(cfg.seed, Domain::TheoryTrial, t as u64);
        let y = t % c;
        sampler.draw(&mut rng, y, &mut a);
        sampler.draw(&mut rng, y, &mut b);
        for j in 0..c {
            if rank(&a, j) < cfg.k && rank(&b, j) < cfg.k {
                // offset 0 is the true class
                shared[(j + c - y) % c] += 1;
            }
        }
    }
    let n = cfg.trials as f64;
    let p_true = shared[0] as f64 / n;
    let p_wrong_max = shared[1..].iter().copied().max().unwrap_or(0) as f64 / n;
    Ok(TheoremEstimate {
        trials: cfg.trials,
        p_true,
        p_wrong_max,
        ratio: if p_wrong_max > 0.0 { p_true / p_wrong_max } else { f64::INFINITY },
        below_min_trials: cfg.trials < MIN_TRIALS,
    })
}

/// One class with few samples among many larger classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub num_classes: usize,
    pub tail_class: usize,
    pub tail_size: usize,
    pub other_size: usize,
}

impl Default for Population {
    fn default() -> Self {
        Population {
            num_classes: 20,
            tail_class: 19,
            tail_size: 10,
            other_size: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropositionConfig {
    pub trials: usize,
    pub population: Population,
    /// Small K used for the tail class.
    pub k_tail: usize,
    /// Shared K it is compared against.
    pub k_shared: usize,
    pub num_experts: usize,
    pub expert: ExpertModel,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for PropositionConfig {
    fn default() -> Self {
        PropositionConfig {
            trials: 10_000,
            population: Population::default(),
            k_tail: 2,
            k_shared: 8,
            num_experts: 2,
            expert: ExpertModel {
                advantage: 0.2,
                concentration: 1.0,
            },
            bootstrap: 1000,
            seed: 0,
        }
    }
}

/// Inclusion counts of the tail class pooled over trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionStats {
    /// Expert proposals that contain the tail class.
    pub included: u64,
    /// Of those, proposals for samples that truly belong to it.
    pub correct: u64,
    /// `correct / included`; `None` when the class was never proposed.
    pub precision: Option<f64>,
}

impl PrecisionStats {
    fn from_counts(included: u64, correct: u64) -> Self {
        PrecisionStats {
            included,
            correct,
            precision: (included > 0).then(|| correct as f64 / included as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropositionEstimate {
    pub trials: usize,
    pub k_tail: usize,
    pub k_shared: usize,
    pub at_k_tail: PrecisionStats,
    pub at_k_shared: PrecisionStats,
    /// Precision at the small K minus precision at the shared K.
    pub margin: f64,
    /// Percentile bootstrap 95% interval of the margin over trials.
    pub ci: (f64, f64),
    /// Whether the interval lies above zero; `None` unless `k_tail < k_shared`.
    pub pass: Option<bool>,
    pub below_min_trials: bool,
}

fn precision(inc: u64, cor: u64) -> f64 {
    if inc == 0 {
        0.0
    } else {
        cor as f64 / inc as f64
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Estimates the precision with which the tail class enters the experts'
/// Top-K sets at a small K versus a shared larger K. A sample's proposal
/// counts as including the tail class only when the expert assigns it
/// positive confidence.
pub fn mc_proposition1(cfg: &PropositionConfig) -> Result<PropositionEstimate> {
    Ok(mc_proposition1_many(cfg, &[cfg.k_tail])?.remove(0))
}

/// [`mc_proposition1`] for several small K values on the same draws and the
/// same bootstrap resamples; `cfg.k_tail` is ignored.
pub fn mc_proposition1_many(cfg: &PropositionConfig, k_tails: &[usize]) -> Result<Vec<PropositionEstimate>> {
    let pop = cfg.population;
    let c = pop.num_classes;
    if c < 2 || pop.tail_class >= c {
        return Err(Error::invalid(format!("tail class {} outside {c} classes", pop.tail_class)));
    }
    if let Some(k) = k_tails.iter().chain([&cfg.k_shared]).find(|&&k| k == 0 || k > c) {
        return Err(Error::invalid(format!("K = {k} outside [1, {c}]")));
    }
    if cfg.trials == 0 || cfg.num_experts == 0 || k_tails.is_empty() {
        return Err(Error::invalid("need at least one trial, one expert and one K"));
    }
    let sampler = ExpertSampler::new(cfg.expert)?;
    let t = pop.tail_class;
    // (included, correct) per K per trial; the shared K comes last
    let ks: Vec<usize> = k_tails.iter().copied().chain([cfg.k_shared]).collect();
    let width = 2 * ks.len();
    let mut per_trial: Vec<u32> = vec![0; cfg.trials * width];
    let mut p = vec![0.0; c];
    for (trial, counts) in per_trial.chunks_mut(width).enumerate() {
        let mut rng = stream(cfg.seed, Domain::TheoryTrial, trial as u64);
        for y in 0..c {
            let size = if y == t { pop.tail_size } else { pop.other_size };
            let hit = (y == t) as u32;
            for _ in 0..size * cfg.num_experts {
                sampler.draw(&mut rng, y, &mut p);
                if p[t] <= 0.0 {
                    continue;
                }
                let r = rank(&p, t);
                for (slot, &k) in ks.iter().enumerate() {
                    if r < k {
                        counts[2 * slot] += 1;
                        counts[2 * slot + 1] += hit;
                    }
                }
            }
        }
    }
    let mut sums = vec![0u64; width];
    for counts in per_trial.chunks(width) {
        for (s, &x) in sums.iter_mut().zip(counts) {
            *s += x as u64;
        }
    }
    let m = k_tails.len();
    let margins = |s: &[u64]| -> Vec<f64> {
        let shared = precision(s[2 * m], s[2 * m + 1]);
        (0..m).map(|j| precision(s[2 * j], s[2 * j + 1]) - shared).collect()
    };
    let point = margins(&sums);
    let mut boot: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.bootstrap); m];
    let mut s = vec![0u64; width];
    for b in 0..cfg.bootstrap {
        let mut rng = stream(cfg.seed, Domain::Bootstrap, b as u64);
        s.iter_mut().for_each(|x| *x = 0);
        for _ in 0..cfg.trials {
            let pick = rng.random_range(0..cfg.trials);
            for (acc, &x) in s.iter_mut().zip(&per_trial[pick * width..(pick + 1) * width]) {
                *acc += x as u64;
            }
        }
        for (j, v) in margins(&s).into_iter().enumerate() {
            boot[j].push(v);
        }
    }
    let shared = PrecisionStats::from_counts(sums[2 * m], sums[2 * m + 1]);
    Ok((0..m)
        .map(|j| {
            let mut b = std::mem::take(&mut boot[j]);
            b.sort_by(f64::total_cmp);
            let ci = if b.is_empty() {
                (point[j], point[j])
            } else {
                (percentile(&b, 0.025), percentile(&b, 0.975))
            };
            PropositionEstimate {
                trials: cfg.trials,
                k_tail: k_tails[j],
                k_shared: cfg.k_shared,
                at_k_tail: PrecisionStats::from_counts(sums[2 * j], sums[2 * j + 1]),
                at_k_shared: shared,
                margin: point[j],
                ci,
                pass: (k_tails[j] < cfg.k_shared).then_some(ci.0 > 0.0),
                below_min_trials: cfg.trials < MIN_TRIALS,
            }
        })
        .collect())
}
