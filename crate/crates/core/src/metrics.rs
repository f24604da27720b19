//! Noise rates, accuracy and macro F1, overall and per frequency group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ClassCounts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

/// Sizes of the head / medium / tail groups for `c` classes:
/// `ceil(C/3)` head, half the remainder (rounded up) medium, the rest tail.
/// Fewer than three classes form a single head group.
pub fn group_sizes(c: usize) -> (usize, usize, usize) {
    if c < 3 {
        return (c, 0, 0);
    }
    let head = c.div_ceil(3);
    let med = (c - head).div_ceil(2);
    (head, med, c - head - med)
}

/// Group membership of every class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupSplit {
    groups: Vec<Group>,
}

impl GroupSplit {
    pub fn group_of(&self, class: usize) -> Group {
        self.groups[class]
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }

    pub fn members(&self, g: Group) -> Vec<usize> {
        (0..self.groups.len()).filter(|&c| self.groups[c] == g).collect()
    }
}

/// Partitions classes by descending count (ascending index among ties).
pub fn group_split(counts: &ClassCounts) -> GroupSplit {
    let c = counts.num_classes();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| counts.get(b).cmp(&counts.get(a)).then(a.cmp(&b)));
    let (head, med, _) = group_sizes(c);
    let mut groups = vec![Group::Tail; c];
    for (rank, &class) in order.iter().enumerate() {
        groups[class] = if rank < head {
            Group::Head
        } else if rank < head + med {
            Group::Medium
        } else {
            Group::Tail
        };
    }
    GroupSplit { groups }
}

/// A rate overall and per group; a group without samples has no rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub overall: f64,
    pub head: Option<f64>,
    pub med: Option<f64>,
    pub tail: Option<f64>,
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "label vectors have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Per-group fraction of samples for which `hit(label, truth)` holds,
/// grouped by the true class.
fn grouped_rate(
    labels: &[usize],
    truth: &[usize],
    split: &GroupSplit,
    hit: impl Fn(usize, usize) -> bool,
) -> Result<GroupRates> {
    check_lengths(labels, truth)?;
    if let Some(&y) = truth.iter().find(|&&y| y >= split.num_classes()) {
        return Err(Error::invalid(format!("true label {y} outside the group split")));
    }
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (&l, &y) in labels.iter().zip(truth) {
        let g = split.group_of(y) as usize;
        totals[g] += 1;
        hits[g] += hit(l, y) as usize;
    }
    let rate = |g: usize| (totals[g] > 0).then(|| hits[g] as f64 / totals[g] as f64);
    let n: usize = totals.iter().sum();
    Ok(GroupRates {
        overall: if n == 0 { 0.0 } else { hits.iter().sum::<usize>() as f64 / n as f64 },
        head: rate(Group::Head as usize),
        med: rate(Group::Medium as usize),
        tail: rate(Group::Tail as usize),
    })
}

/// Fraction of labels that disagree with the truth, overall and per group.
pub fn noise_rate_by_group(labels: &[usize], truth: &[usize], split: &GroupSplit) -> Result<GroupRates> {
    grouped_rate(labels, truth, split, |l, y| l != y)
}

/// Per-group recall of predictions.
pub fn accuracy_by_group(pred: &[usize], truth: &[usize], split: &GroupSplit) -> Result<GroupRates> {
    grouped_rate(pred, truth, split, |l, y| l == y)
}

/// Per-class noise rate `Pr(label != y | y = c)`; `None` for absent classes.
pub fn per_class_noise_rate(labels: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    check_lengths(labels, truth)?;
    let mut wrong = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&l, &y) in labels.iter().zip(truth) {
        if y >= num_classes {
            return Err(Error::invalid(format!("true label {y} out of range")));
        }
        total[y] += 1;
        wrong[y] += (l != y) as usize;
    }
    Ok(wrong
        .iter()
        .zip(&total)
        .map(|(&w, &t)| (t > 0).then(|| w as f64 / t as f64))
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty prediction set"));
    }
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1. A class with no true positives, which
/// includes a class absent from both predictions and truth, scores 0.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(pred, truth)?;
    if num_classes == 0 {
        return Err(Error::invalid("macro F1 needs at least one class"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!("label ({p}, {t}) out of range")));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let sum: f64 = (0..num_classes)
        .map(|c| {
            // F1 = 2TP / (2TP + FP + FN)
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / num_classes as f64)
}

/// Everything `evaluate` reports for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub nr_overall: Option<f64>,
    pub nr_head: Option<f64>,
    pub nr_med: Option<f64>,
    pub nr_tail: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub per_class_nr: Option<Vec<Option<f64>>>,
}
