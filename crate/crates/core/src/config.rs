//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, PretrainConfig};
use crate::error::{Error, Result};
use crate::posttrain::PostTrainConfig;
use crate::rewards::CombinedReward;
use crate::velocity::Arch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![64, 64, 64] }
    }
}

/// Sample counts and settings for the `verify` checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub stein_samples: usize,
    pub marginal_samples: usize,
    pub marginal_steps: usize,
    pub marginal_gammas: Vec<f64>,
    pub sigma_d: f64,
    pub gradcheck_cases: usize,
    pub degeneracy_cases: usize,
    pub prototype_samples: usize,
    pub prototype_sigma: f64,
    pub jacobian_points: usize,
    pub jacobian_step: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            stein_samples: 1_000_000,
            marginal_samples: 10_000,
            marginal_steps: 40,
            marginal_gammas: vec![0.0, 0.05, 0.2],
            sigma_d: 1.0,
            gradcheck_cases: 100,
            degeneracy_cases: 100,
            prototype_samples: 1000,
            prototype_sigma: 0.05,
            jacobian_points: 100,
            jacobian_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub posttrain: PostTrainConfig,
    #[serde(default)]
    pub reward: Option<CombinedReward>,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSpec) -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: default_output_dir(),
            dataset,
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            posttrain: PostTrainConfig::default(),
            reward: None,
            verify: VerifyConfig::default(),
        }
    }

    /// Parses and validates; syntax and schema errors carry line and column.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
        cfg.validate().map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn arch(&self) -> Result<Arch> {
        Arch::new(self.dataset.dim(), self.model.hidden.clone(), self.dataset.n_conditions())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.arch()?;
        self.pretrain.validate()?;
        self.posttrain.validate()?;
        if let Some(reward) = &self.reward {
            reward.validate()?;
            for term in &reward.terms {
                if let Some(d) = term.spec.dim() {
                    if d != self.dataset.dim() {
                        return Err(Error::Config(format!(
                            "{} reward has dimension {d} but the dataset has {}",
                            term.spec.name(),
                            self.dataset.dim()
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn reward(&self) -> Result<&CombinedReward> {
        self.reward
            .as_ref()
            .ok_or_else(|| Error::Config("a reward section is required for post-training".into()))
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).into()
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
