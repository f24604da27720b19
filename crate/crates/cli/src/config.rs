//! Run configuration: a TOML file with every field defaulted, overridden by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use care::consensus::KPolicy;
use care::experts::DEFAULT_SCALE;
use care::synth::{ClusterSpec, ImbalanceSpec, NoiseKind, NoiseSpec};
use care::trainer::{LossKind, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives data generation, noise, head initialization and shuffling.
    pub seed: u64,
    pub synth: SynthConfig,
    pub train: TrainSection,
    pub consensus: ConsensusConfig,
    pub verify: VerifyConfig,
    pub io: IoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Samples in the largest class.
    pub max_per_class: usize,
    pub imbalance_factor: f64,
    pub noise: NoiseKind,
    pub noise_rate: f64,
    pub feature_dim: usize,
    /// Per-coordinate standard deviation added to prototypes.
    pub spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 20,
            max_per_class: 500,
            imbalance_factor: 10.0,
            noise: NoiseKind::SymmetricUniform,
            noise_rate: 0.5,
            feature_dim: 32,
            spread: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss: LossKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            loss: t.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub policy: KPolicy,
    /// Softmax scale of the cosine experts.
    pub scale: f64,
    pub be_weight: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            policy: KPolicy::PowerQuarter,
            scale: DEFAULT_SCALE,
            be_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub trials: usize,
    /// Small and shared K compared in the tail-precision check.
    pub k_pair: [usize; 2],
    pub oracle_instances: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            trials: 10_000,
            k_pair: [2, 8],
            oracle_instances: 1000,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Confidence files replacing the computed text / image experts.
    pub te_file: Option<PathBuf>,
    pub ie_file: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn imbalance(&self) -> ImbalanceSpec {
        ImbalanceSpec {
            imbalance_factor: self.synth.imbalance_factor,
            max_per_class: self.synth.max_per_class,
            num_classes: self.synth.num_classes,
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            kind: self.synth.noise,
            rate: self.synth.noise_rate,
            seed: self.seed,
        }
    }

    pub fn cluster(&self) -> ClusterSpec {
        ClusterSpec {
            feature_dim: self.synth.feature_dim,
            spread: self.synth.spread,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            loss: t.loss,
            seed: self.seed,
        }
    }
}
