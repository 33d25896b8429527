//! Run configuration shared by the training, evaluation and ablation
//! commands.

use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::VarianceRange;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::networks::NetworkConfig;
use crate::trainer::TrainConfig;
use crate::weighting::WeightConfig;

fn default_train_count() -> usize {
    64
}
fn default_test_count() -> usize {
    16
}
fn default_size() -> usize {
    64
}

/// Seeded synthetic crack data used when no dataset directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    /// Generic texture images for SR pre-training.
    #[serde(default = "default_train_count")]
    pub pretrain_count: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { train_count: 64, test_count: 16, pretrain_count: 64, size: 64, seed: 0 }
    }
}

/// Where training and test pairs come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root with `images/` and `masks/`, or a manifest JSON file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crack: Option<PathBuf>,
    /// Directory of generic images for SR pre-training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SynthConfig,
}

fn default_var_min() -> f64 {
    0.2
}
fn default_var_max() -> f64 {
    4.0
}

/// Blur sampling range for on-the-fly degradation (x4 only).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    #[serde(default = "default_var_min")]
    pub variance_min: f64,
    #[serde(default = "default_var_max")]
    pub variance_max: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self { variance_min: 0.2, variance_max: 4.0 }
    }
}

impl DegradationConfig {
    pub fn range(&self) -> VarianceRange {
        VarianceRange { min: self.variance_min, max: self.variance_max }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub degradation: DegradationConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub weights: WeightConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Excluded from the config hash.
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        as_config(self.network.validate())?;
        as_config(self.loss.validate())?;
        as_config(self.weights.validate())?;
        as_config(self.train.validate())?;
        let d = &self.degradation;
        if !(d.variance_min > 0.0 && d.variance_min <= d.variance_max && d.variance_max.is_finite()) {
            return Err(Error::Config("degradation variance range must satisfy 0 < min <= max".into()));
        }
        let s = &self.data.synthetic;
        if s.size < 32 || !s.size.is_multiple_of(4) {
            return Err(Error::Config("synthetic size must be a multiple of 4 and at least 32".into()));
        }
        if self.train.patch > s.size && self.data.crack.is_none() {
            return Err(Error::Config(format!("patch {} exceeds synthetic size {}", self.train.patch, s.size)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form without `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        // serde_json maps are ordered by key, which makes this canonical.
        let text = serde_json::to_string(&v).expect("value serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Short form of [`RunConfig::hash`] used in file metadata.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// JSON schema of [`RunConfig`].
pub fn schema() -> String {
    serde_json::to_string_pretty(&schemars::schema_for!(RunConfig)).expect("schema serializes")
}
