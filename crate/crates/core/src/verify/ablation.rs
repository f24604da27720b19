//! Runs with a reduced expert panel.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::trainer::{run_care, CareConfig, ExpertSlot, RunReport};
use crate::types::Dataset;

/// Which auxiliary experts join the base expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Auxiliary {
    Text,
    Image,
    Both,
}

/// Runs the rectification loop with only the chosen auxiliary experts,
/// keeping every other setting of `base`.
pub fn ablation_single_expert(d: &Dataset, aux: Auxiliary, be_weight: f64, base: &CareConfig) -> Result<RunReport> {
    let mut cfg = base.clone();
    cfg.be_weight = be_weight;
    let on = |slot: &ExpertSlot| match slot {
        ExpertSlot::Off => ExpertSlot::Computed,
        other => other.clone(),
    };
    let (text, image) = match aux {
        Auxiliary::Text => (on(&base.experts.text), ExpertSlot::Off),
        Auxiliary::Image => (ExpertSlot::Off, on(&base.experts.image)),
        Auxiliary::Both => (on(&base.experts.text), on(&base.experts.image)),
    };
    cfg.experts.text = text;
    cfg.experts.image = image;
    run_care(d, &cfg)
}

/// True when no epoch moved any label away from the observed one.
pub fn never_relabels(report: &RunReport) -> bool {
    report.epochs.iter().all(|e| e.relabeled == 0)
}
