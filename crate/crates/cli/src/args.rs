//! Command-line flags and how they override the configuration file.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use care::consensus::KPolicy;
use care::synth::NoiseKind;
use care::trainer::LossKind;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "care", version, about = "Rectify noisy labels on long-tailed data by class-adaptive expert consensus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tailed dataset with injected label noise.
    Synth(SynthArgs),
    /// Run the rectification loop on a dataset directory.
    Rectify(RectifyArgs),
    /// Run the statistical and oracle checks.
    Verify(VerifyArgs),
    /// Score a finished run against a dataset's ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SharedArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML configuration file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Symmetric,
    Pairflip,
    Joint,
}

impl From<NoiseArg> for NoiseKind {
    fn from(n: NoiseArg) -> Self {
        match n {
            NoiseArg::Symmetric => NoiseKind::SymmetricUniform,
            NoiseArg::Pairflip => NoiseKind::AsymmetricPairflip,
            NoiseArg::Joint => NoiseKind::Joint,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Imbalance factor: largest over smallest class size.
    #[arg(long = "if", value_name = "F")]
    pub imbalance_factor: Option<f64>,
    #[arg(long)]
    pub max_per_class: Option<usize>,
    /// Noise rate.
    #[arg(long, value_name = "F")]
    pub nr: Option<f64>,
    #[arg(long, value_enum)]
    pub noise: Option<NoiseArg>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub spread: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KFormArg {
    Quarter,
    Step,
    Exp,
    Log,
    Linear,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    La,
    Ce,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::La => LossKind::La,
            LossArg::Ce => LossKind::Ce,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct RectifyArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub k_form: Option<KFormArg>,
    /// K for the global form; implies `--k-form global`.
    #[arg(long, value_name = "N")]
    pub k_global: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long)]
    pub be_weight: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// CARECONF file used in place of the computed text expert.
    #[arg(long)]
    pub te_file: Option<PathBuf>,
    /// CARECONF file used in place of the computed image expert.
    #[arg(long)]
    pub ie_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Small and shared K for the tail-precision check.
    #[arg(long, num_args = 2, value_names = ["K_T", "K"])]
    pub k_pair: Option<Vec<usize>>,
    #[arg(long)]
    pub oracle_instances: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `rectify`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory the run was made on.
    #[arg(long)]
    pub data: PathBuf,
    /// Write the metrics here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn base_config(shared: &SharedArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = shared.seed {
        cfg.seed = s;
    }
    if let Some(o) = &shared.out {
        cfg.io.out = Some(o.clone());
    }
    Ok(cfg)
}

impl SynthArgs {
    pub fn effective(&self) -> Result<RunConfig, CliError> {
        let mut cfg = base_config(&self.shared)?;
        let s = &mut cfg.synth;
        if let Some(v) = self.classes {
            s.num_classes = v;
        }
        if let Some(v) = self.imbalance_factor {
            s.imbalance_factor = v;
        }
        if let Some(v) = self.max_per_class {
            s.max_per_class = v;
        }
        if let Some(v) = self.nr {
            s.noise_rate = v;
        }
        if let Some(v) = self.noise {
            s.noise = v.into();
        }
        if let Some(v) = self.dim {
            s.feature_dim = v;
        }
        if let Some(v) = self.spread {
            s.spread = v;
        }
        Ok(cfg)
    }
}

impl RectifyArgs {
    pub fn effective(&self) -> Result<RunConfig, CliError> {
        let mut cfg = base_config(&self.shared)?;
        if let Some(d) = &self.data {
            cfg.io.data = Some(d.clone());
        }
        let current = cfg.consensus.policy;
        let form = self.k_form.or(self.k_global.map(|_| KFormArg::Global));
        if let Some(form) = form {
            cfg.consensus.policy = match form {
                KFormArg::Quarter => KPolicy::PowerQuarter,
                KFormArg::Step => match current {
                    p @ KPolicy::Step { .. } => p,
                    _ => KPolicy::DEFAULT_STEP,
                },
                KFormArg::Exp => KPolicy::Exponential,
                KFormArg::Log => KPolicy::Logarithmic,
                KFormArg::Linear => match current {
                    p @ KPolicy::Linear { .. } => p,
                    _ => KPolicy::DEFAULT_LINEAR,
                },
                KFormArg::Global => match (self.k_global, current) {
                    (Some(k), _) => KPolicy::Global { k },
                    (None, p @ KPolicy::Global { .. }) => p,
                    (None, _) => {
                        return Err(CliError::Validation("--k-form global needs --k-global <n>".into()));
                    }
                },
            };
        }
        if self.k_global.is_some() && form != Some(KFormArg::Global) {
            return Err(CliError::Validation("--k-global only applies to --k-form global".into()));
        }
        if let Some(l) = self.loss {
            cfg.train.loss = l.into();
        }
        if let Some(w) = self.be_weight {
            cfg.consensus.be_weight = w;
        }
        if let Some(s) = self.scale {
            cfg.consensus.scale = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(p) = &self.te_file {
            cfg.io.te_file = Some(p.clone());
        }
        if let Some(p) = &self.ie_file {
            cfg.io.ie_file = Some(p.clone());
        }
        Ok(cfg)
    }
}

impl VerifyArgs {
    pub fn effective(&self) -> Result<RunConfig, CliError> {
        let mut cfg = base_config(&self.shared)?;
        if let Some(t) = self.trials {
            cfg.verify.trials = t;
        }
        if let Some(pair) = &self.k_pair {
            cfg.verify.k_pair = [pair[0], pair[1]];
        }
        if let Some(n) = self.oracle_instances {
            cfg.verify.oracle_instances = n;
        }
        Ok(cfg)
    }
}
