use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use care::io::{load_confidence_file, load_dataset, load_head, read_labels, save_dataset, save_head, write_u32_array};
use care::metrics::{accuracy, macro_f1, noise_rate_by_group, per_class_noise_rate, MetricRecord};
use care::synth::{inject_noise, longtail_profile, synth_features};
use care::trainer::{predict_all, reference_split, run_care, CareConfig, EpochMetrics, ExpertPanel, ExpertSlot, RunReport};
use care::verify::{run_suite, theory::MIN_TRIALS, SuiteConfig, VerificationReport};
use care::Dataset;

use crate::args::{EvaluateArgs, RectifyArgs, SynthArgs, VerifyArgs};
use crate::config::RunConfig;
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CURVES_FILE: &str = "curves.csv";
pub const LABELS_FILE: &str = "rectified_labels.u32";
pub const HEAD_FILE: &str = "head.f64";
pub const REPORT_FILE: &str = "report.json";
pub const VERIFY_FILE: &str = "verification.json";

fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    path.clone()
        .ok_or_else(|| CliError::Validation(format!("{flag} is required (flag or config file)")))
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let cfg = args.effective()?;
    let out = require(&cfg.io.out, "--out")?;
    let counts = longtail_profile(&cfg.imbalance())?;
    let clean = synth_features(&counts, &cfg.cluster())?;
    let noisy = inject_noise(&clean, &cfg.noise())?;
    let source = serde_json::json!({
        "generator": "synth",
        "seed": cfg.seed,
        "synth": cfg.synth,
    });
    save_dataset(&out, &noisy, source)?;
    eprintln!(
        "wrote {} samples, {} classes to {}",
        noisy.num_samples(),
        noisy.num_classes(),
        out.display()
    );
    Ok(())
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub num_samples: usize,
    pub num_classes: usize,
    pub initial: EpochMetrics,
    #[serde(rename = "final")]
    pub last: EpochMetrics,
    pub final_counts: Vec<usize>,
    pub final_prior: Vec<f64>,
}

/// Prefixes IO failures with the path being read.
fn at(path: &Path) -> impl Fn(care::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Io(msg) if !msg.contains(&path.display().to_string()) => {
            CliError::Io(format!("{}: {msg}", path.display()))
        }
        other => other,
    }
}

fn expert_slot(path: &Option<PathBuf>, d: &Dataset) -> Result<ExpertSlot, CliError> {
    Ok(match path {
        Some(p) => ExpertSlot::File(load_confidence_file(p, d.num_samples(), d.num_classes()).map_err(at(p))?),
        None => ExpertSlot::Computed,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, d: &Dataset, report: &RunReport) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut jsonl = String::new();
    for e in &report.epochs {
        jsonl.push_str(&serde_json::to_string(e)?);
        jsonl.push('\n');
    }
    fs::write(dir.join(METRICS_FILE), jsonl)?;

    let mut csv = String::from("epoch,nr_overall,nr_head,nr_med,nr_tail\n");
    for e in std::iter::once(&report.initial).chain(&report.epochs) {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch,
            fmt_opt(e.nr_overall),
            fmt_opt(e.nr_head),
            fmt_opt(e.nr_med),
            fmt_opt(e.nr_tail)
        ));
    }
    fs::write(dir.join(CURVES_FILE), csv)?;

    write_u32_array(&dir.join(LABELS_FILE), &report.final_state.labels)?;
    save_head(&dir.join(HEAD_FILE), &report.head)?;

    let summary = RunSummary {
        config: cfg.clone(),
        num_samples: d.num_samples(),
        num_classes: d.num_classes(),
        initial: report.initial.clone(),
        last: report.last().clone(),
        final_counts: report.final_state.counts.counts.clone(),
        final_prior: report.final_state.prior.clone(),
    };
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

pub fn rectify(args: &RectifyArgs) -> Result<(), CliError> {
    let cfg = args.effective()?;
    let data = require(&cfg.io.data, "--data")?;
    let out = require(&cfg.io.out, "--out")?;
    let d = load_dataset(&data).map_err(at(&data))?;
    let care_cfg = CareConfig {
        train: cfg.train_config(),
        policy: cfg.consensus.policy,
        scale: cfg.consensus.scale,
        be_weight: cfg.consensus.be_weight,
        experts: ExpertPanel {
            text: expert_slot(&cfg.io.te_file, &d)?,
            image: expert_slot(&cfg.io.ie_file, &d)?,
        },
    };
    let report = run_care(&d, &care_cfg)?;
    write_run_dir(&out, &cfg, &d, &report)?;
    let last = report.last();
    match (report.initial.nr_overall, last.nr_overall) {
        (Some(a), Some(b)) => eprintln!("noise rate {a:.4} -> {b:.4} after {} epochs", last.epoch),
        _ => eprintln!("{} labels changed after {} epochs", last.relabeled, last.epoch),
    }
    Ok(())
}

fn suite_config(cfg: &RunConfig) -> SuiteConfig {
    SuiteConfig {
        trials: cfg.verify.trials,
        seed: cfg.seed,
        k_pair: (cfg.verify.k_pair[0], cfg.verify.k_pair[1]),
        oracle_instances: cfg.verify.oracle_instances,
    }
}

pub fn verify(args: &VerifyArgs) -> Result<VerificationReport, CliError> {
    let cfg = args.effective()?;
    if cfg.verify.trials < MIN_TRIALS {
        eprintln!(
            "warning: {} trials is below the statistical minimum of {MIN_TRIALS}; pass/fail is not meaningful",
            cfg.verify.trials
        );
    }
    let report = run_suite(&suite_config(&cfg))?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(out) = &cfg.io.out {
        fs::create_dir_all(out)?;
        fs::write(out.join(VERIFY_FILE), &json)?;
    }
    std::io::stdout().write_all(json.as_bytes())?;
    if !report.passed() {
        return Err(CliError::Verification("one or more checks did not pass".into()));
    }
    Ok(report)
}

/// Metrics of a run directory against its dataset.
pub fn evaluate_run(run: &Path, data: &Path) -> Result<MetricRecord, CliError> {
    let d = load_dataset(data).map_err(at(data))?;
    let labels_path = run.join(LABELS_FILE);
    let labels = read_labels(&labels_path).map_err(at(&labels_path))?;
    if labels.len() != d.num_samples() {
        return Err(CliError::Validation(format!(
            "run has {} labels, dataset has {} samples",
            labels.len(),
            d.num_samples()
        )));
    }
    let report_path = run.join(REPORT_FILE);
    let text = fs::read_to_string(&report_path).map_err(|e| CliError::Io(format!("{}: {e}", report_path.display())))?;
    let summary: RunSummary =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", report_path.display())))?;
    let head = load_head(&run.join(HEAD_FILE), summary.config.consensus.scale)?;
    let Some(truth) = d.true_labels() else {
        eprintln!(
            "dataset has no ground-truth labels: noise rates are null, and accuracy / macro F1 \
             are not computed against observed labels"
        );
        return Ok(MetricRecord {
            nr_overall: None,
            nr_head: None,
            nr_med: None,
            nr_tail: None,
            accuracy: None,
            macro_f1: None,
            per_class_nr: None,
        });
    };
    let nr = noise_rate_by_group(&labels, truth, &reference_split(&d))?;
    let pred = predict_all(&head, &d);
    Ok(MetricRecord {
        nr_overall: Some(nr.overall),
        nr_head: nr.head,
        nr_med: nr.med,
        nr_tail: nr.tail,
        accuracy: Some(accuracy(&pred, truth)?),
        macro_f1: Some(macro_f1(&pred, truth, d.num_classes())?),
        per_class_nr: Some(per_class_noise_rate(&labels, truth, d.num_classes())?),
    })
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let record = evaluate_run(&args.run, &args.data)?;
    let json = serde_json::to_string_pretty(&record)? + "\n";
    if let Some(out) = &args.out {
        fs::write(out, &json)?;
    }
    std::io::stdout().write_all(json.as_bytes())?;
    Ok(())
}
