//! Logit-adjusted training of the cosine head and the full rectification
//! loop: consensus pass, recount, then one SGD pass per epoch.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::consensus::{epoch_consensus, ConsensusInputs, KPolicy};
use crate::error::{Error, Result};
use crate::experts::{check_be_weight, ie_matrix, te_matrix, CosineHead};
use crate::metrics::{accuracy, accuracy_by_group, group_split, macro_f1, noise_rate_by_group, GroupSplit};
use crate::rng::{stream, Domain};
use crate::types::{dot, l2_norm, ClassCounts, ConfidenceMatrix, Dataset, FrequencyMatrix, Matrix, RectifiedState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Logit-adjusted cross-entropy with the rectified class prior.
    La,
    /// Plain cross-entropy.
    Ce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss: LossKind::La,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be positive"));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Add-one smoothed class prior `(n_c + 1) / (N + C)`.
pub fn smoothed_prior(counts: &ClassCounts) -> Vec<f64> {
    let denom = (counts.total() + counts.num_classes()) as f64;
    counts.counts.iter().map(|&n| (n + 1) as f64 / denom).collect()
}

fn log_prior(prior: &[f64]) -> Result<Vec<f64>> {
    prior
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            if p > 0.0 && p.is_finite() {
                Ok(p.ln())
            } else {
                Err(Error::invalid(format!("prior of class {c} is {p}; it must be positive")))
            }
        })
        .collect()
}

/// `log(sum exp(v))` and the softmax of `v`, max-subtracted.
fn log_softmax_parts(v: &[f64]) -> (f64, Vec<f64>) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    (max + z.ln(), exps.into_iter().map(|e| e / z).collect())
}

/// Logit-adjusted cross-entropy of logits `z` for class `y`.
pub fn la_loss(z: &[f64], y: usize, prior: &[f64]) -> Result<f64> {
    if z.len() != prior.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logits, {} prior entries",
            z.len(),
            prior.len()
        )));
    }
    if y >= z.len() {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let lp = log_prior(prior)?;
    Ok(adjusted_loss(z, y, Some(&lp)))
}

fn adjusted_loss(z: &[f64], y: usize, log_prior: Option<&[f64]>) -> f64 {
    let adj: Vec<f64> = match log_prior {
        Some(lp) => z.iter().zip(lp).map(|(a, b)| a + b).collect(),
        None => z.to_vec(),
    };
    let (lse, _) = log_softmax_parts(&adj);
    (lse - adj[y]).max(0.0)
}

/// Mean loss of a batch and its gradient w.r.t. raw (not necessarily
/// unit-norm) weight rows, through `z_c = s * <v_c, f> / |v_c|`.
///
/// `log_prior = None` gives plain cross-entropy.
pub fn cosine_loss_grad(
    weights: &Matrix,
    scale: f64,
    features: &[&[f64]],
    labels: &[usize],
    log_prior: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    let (c, d) = (weights.rows(), weights.cols());
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} features, {} labels",
            features.len(),
            labels.len()
        )));
    }
    if let Some(lp) = log_prior {
        if lp.len() != c {
            return Err(Error::DimensionMismatch(format!("{} prior entries for {c} classes", lp.len())));
        }
    }
    let norms: Vec<f64> = weights.iter_rows().map(l2_norm).collect();
    let units: Vec<Vec<f64>> = weights
        .iter_rows()
        .zip(&norms)
        .map(|(w, &n)| w.iter().map(|x| x / n).collect())
        .collect();
    let mut grad = Matrix::zeros(c, d);
    let mut loss = 0.0;
    let inv_b = 1.0 / features.len() as f64;
    for (f, &y) in features.iter().zip(labels) {
        if f.len() != d || y >= c {
            return Err(Error::DimensionMismatch(format!(
                "feature of length {} or label {y} does not fit a {c}x{d} head",
                f.len()
            )));
        }
        let cos: Vec<f64> = units.iter().map(|u| dot(u, f)).collect();
        let adj: Vec<f64> = cos
            .iter()
            .enumerate()
            .map(|(k, &x)| scale * x + log_prior.map_or(0.0, |lp| lp[k]))
            .collect();
        let (lse, probs) = log_softmax_parts(&adj);
        loss += (lse - adj[y]) * inv_b;
        for k in 0..c {
            let dz = (probs[k] - if k == y { 1.0 } else { 0.0 }) * inv_b;
            // d z_k / d v_k = s / |v_k| * (f - cos_k * u_k)
            let coef = dz * scale / norms[k];
            let row = grad.row_mut(k);
            for ((g, &fj), &uj) in row.iter_mut().zip(f.iter()).zip(&units[k]) {
                *g += coef * (fj - cos[k] * uj);
            }
        }
    }
    Ok((loss, grad))
}

/// Batch loss and gradient for the head under the configured loss.
pub fn la_grad(
    head: &CosineHead,
    features: &[&[f64]],
    labels: &[usize],
    prior: Option<&[f64]>,
) -> Result<(f64, Matrix)> {
    let lp = prior.map(log_prior).transpose()?;
    cosine_loss_grad(head.weights(), head.scale(), features, labels, lp.as_deref())
}

/// SGD-with-momentum state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Matrix,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(head: &CosineHead) -> Self {
        OptimizerState {
            velocity: Matrix::zeros(head.num_classes(), head.dim()),
            step: 0,
        }
    }
}

/// `v = m v + g + wd w; w -= lr v`, then rows back to unit norm.
pub fn sgd_step(head: &mut CosineHead, grad: &Matrix, opt: &mut OptimizerState, cfg: &TrainConfig) -> Result<()> {
    if grad.rows() != head.num_classes() || grad.cols() != head.dim() {
        return Err(Error::DimensionMismatch("gradient shape differs from the head".into()));
    }
    if grad.as_slice().iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let w = head.weights_mut();
    for ((v, &g), x) in opt
        .velocity
        .as_mut_slice()
        .iter_mut()
        .zip(grad.as_slice())
        .zip(w.as_mut_slice())
    {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *x;
        *x -= cfg.learning_rate * *v;
    }
    w.normalize_rows();
    if w.iter_rows().any(|r| l2_norm(r) == 0.0) {
        return Err(Error::NonFinite("head weights collapsed to zero"));
    }
    opt.step += 1;
    Ok(())
}

/// Which auxiliary experts vote, and where their confidences come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertSlot {
    Off,
    /// TE: prototype similarities. IE: the current head.
    Computed,
    /// Fixed confidences loaded from a file.
    File(ConfidenceMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPanel {
    pub text: ExpertSlot,
    pub image: ExpertSlot,
}

impl Default for ExpertPanel {
    fn default() -> Self {
        ExpertPanel {
            text: ExpertSlot::Computed,
            image: ExpertSlot::Computed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareConfig {
    pub train: TrainConfig,
    pub policy: KPolicy,
    pub scale: f64,
    pub be_weight: f64,
    pub experts: ExpertPanel,
}

impl Default for CareConfig {
    fn default() -> Self {
        CareConfig {
            train: TrainConfig::default(),
            policy: KPolicy::PowerQuarter,
            scale: crate::experts::DEFAULT_SCALE,
            be_weight: 1.0,
            experts: ExpertPanel::default(),
        }
    }
}

/// One line of the per-epoch curve. Epoch 0 is the state before training;
/// truth-dependent fields are `None` when the dataset has no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nr_overall: Option<f64>,
    pub nr_head: Option<f64>,
    pub nr_med: Option<f64>,
    pub nr_tail: Option<f64>,
    pub train_loss: Option<f64>,
    pub acc_eval: Option<f64>,
    pub class_counts: Vec<usize>,
    pub acc_head: Option<f64>,
    pub acc_med: Option<f64>,
    pub acc_tail: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Samples whose rectified label differs from the observed label.
    pub relabeled: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub initial: EpochMetrics,
    pub epochs: Vec<EpochMetrics>,
    pub final_state: RectifiedState,
    pub head: CosineHead,
}

impl RunReport {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().unwrap_or(&self.initial)
    }
}

/// Head predictions for every sample.
pub fn predict_all(head: &CosineHead, d: &Dataset) -> Vec<usize> {
    (0..d.num_samples()).map(|i| head.predict(d.feature(i))).collect()
}

/// Frequency split used for group metrics: true-class sizes when truth is
/// known, observed-label sizes otherwise.
pub fn reference_split(d: &Dataset) -> GroupSplit {
    let labels = d.true_labels().unwrap_or(d.observed_labels());
    group_split(&ClassCounts::from_labels(labels, d.num_classes(), 0))
}

pub(crate) fn epoch_metrics(
    d: &Dataset,
    split: &GroupSplit,
    epoch: usize,
    labels: &[usize],
    head: &CosineHead,
    train_loss: Option<f64>,
) -> Result<EpochMetrics> {
    let relabeled = labels.iter().zip(d.observed_labels()).filter(|(a, b)| a != b).count();
    let class_counts = ClassCounts::from_labels(labels, d.num_classes(), epoch).counts;
    let mut m = EpochMetrics {
        epoch,
        nr_overall: None,
        nr_head: None,
        nr_med: None,
        nr_tail: None,
        train_loss,
        acc_eval: None,
        class_counts,
        acc_head: None,
        acc_med: None,
        acc_tail: None,
        macro_f1: None,
        relabeled,
    };
    if let Some(truth) = d.true_labels() {
        let nr = noise_rate_by_group(labels, truth, split)?;
        let pred = predict_all(head, d);
        let acc = accuracy_by_group(&pred, truth, split)?;
        m.nr_overall = Some(nr.overall);
        m.nr_head = nr.head;
        m.nr_med = nr.med;
        m.nr_tail = nr.tail;
        m.acc_eval = Some(accuracy(&pred, truth)?);
        m.acc_head = acc.head;
        m.acc_med = acc.med;
        m.acc_tail = acc.tail;
        m.macro_f1 = Some(macro_f1(&pred, truth, d.num_classes())?);
    }
    Ok(m)
}

fn check_file_expert(slot: &ExpertSlot, d: &Dataset, name: &str) -> Result<()> {
    if let ExpertSlot::File(m) = slot {
        if m.num_samples() != d.num_samples() || m.num_classes() != d.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "{name} confidence file is {}x{}, dataset is {}x{}",
                m.num_samples(),
                m.num_classes(),
                d.num_samples(),
                d.num_classes()
            )));
        }
    }
    Ok(())
}

/// One minibatch SGD pass over `(features, labels)` in a seeded order.
/// Returns the mean pre-step loss.
fn train_pass(
    head: &mut CosineHead,
    opt: &mut OptimizerState,
    d: &Dataset,
    labels: &[usize],
    prior: Option<&[f64]>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..d.num_samples()).collect();
    order.shuffle(&mut stream(cfg.seed, Domain::Shuffle, epoch as u64));
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let feats: Vec<&[f64]> = batch.iter().map(|&i| d.feature(i)).collect();
        let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let (loss, grad) = la_grad(head, &feats, &ys, prior)?;
        total += loss * batch.len() as f64;
        sgd_step(head, &grad, opt, cfg)?;
    }
    Ok(total / d.num_samples() as f64)
}

/// The full rectification loop.
///
/// Epoch 0 starts from the observed labels, a frequency matrix holding the
/// base expert's one-hots, and a randomly initialized head. Each epoch then
/// runs consensus with the pre-update head, recounts the rectified labels,
/// and makes one SGD pass on them with the smoothed rectified prior.
pub fn run_care(d: &Dataset, cfg: &CareConfig) -> Result<RunReport> {
    cfg.train.validate()?;
    cfg.policy.validate()?;
    check_be_weight(cfg.be_weight)?;
    if cfg.scale.is_nan() || cfg.scale <= 0.0 {
        return Err(Error::invalid(format!("scale must be positive, got {}", cfg.scale)));
    }
    check_file_expert(&cfg.experts.text, d, "TE")?;
    check_file_expert(&cfg.experts.image, d, "IE")?;
    let c = d.num_classes();
    let observed = d.observed_labels();
    let split = reference_split(d);
    let mut head = CosineHead::random(c, d.feature_dim(), cfg.scale, cfg.train.seed)?;
    let mut opt = OptimizerState::new(&head);
    let te = match &cfg.experts.text {
        ExpertSlot::Computed => Some(te_matrix(d, cfg.scale)),
        ExpertSlot::File(m) => Some(m.clone()),
        ExpertSlot::Off => None,
    };
    let mut freq = FrequencyMatrix::from_observed(observed, c, cfg.be_weight);
    let mut state = RectifiedState::from_labels(observed.to_vec(), c, 0);
    let initial = epoch_metrics(d, &split, 0, &state.labels, &head, None)?;
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    for e in 1..=cfg.train.epochs {
        let ie = match &cfg.experts.image {
            ExpertSlot::Computed => Some(ie_matrix(&head, d)?),
            ExpertSlot::File(m) => Some(m.clone()),
            ExpertSlot::Off => None,
        };
        let experts: Vec<&ConfidenceMatrix> = te.iter().chain(ie.iter()).collect();
        state = epoch_consensus(
            &mut freq,
            &ConsensusInputs {
                observed,
                experts: &experts,
                policy: &cfg.policy,
                prev_labels: &state.labels,
                prev_counts: &state.counts,
                be_weight: cfg.be_weight,
            },
        )?;
        let prior = smoothed_prior(&state.counts);
        let prior_arg = match cfg.train.loss {
            LossKind::La => Some(prior.as_slice()),
            LossKind::Ce => None,
        };
        let loss = train_pass(&mut head, &mut opt, d, &state.labels, prior_arg, &cfg.train, e)?;
        epochs.push(epoch_metrics(d, &split, e, &state.labels, &head, Some(loss))?);
    }
    Ok(RunReport {
        initial,
        epochs,
        final_state: state,
        head,
    })
}
