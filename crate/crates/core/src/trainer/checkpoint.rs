use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Models, StagePlan, StepRecord, TrainData, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::networks::{load_tensors, save_tensors, Adam};

const CHECKPOINT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.safetensors";
const MANIFEST_FILE: &str = "manifest.json";

/// Mean losses over the steps since the previous checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointSummary {
    pub steps: usize,
    #[serde(rename = "L_J")]
    pub l_j: f64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    #[serde(rename = "L_C")]
    pub l_c: Option<f64>,
}

impl CheckpointSummary {
    pub fn from_records(records: &[StepRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let l_c = records.iter().map(|r| r.l_c).sum::<Option<f64>>().map(|s| s / n);
        Self {
            steps: records.len(),
            l_j: records.iter().map(|r| r.l_j).sum::<f64>() / n,
            l_s: records.iter().map(|r| r.l_s).sum::<f64>() / n,
            l_c: if records.is_empty() { None } else { l_c },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub stage: u8,
    pub freeze_sr: bool,
    pub iteration: usize,
    pub total: usize,
    pub config_hash: String,
    pub seed: u64,
    pub blur_skip: bool,
    pub summary: CheckpointSummary,
}

impl CheckpointManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::State(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::State(format!("{}: {e}", path.display())))?;
        if m.version != CHECKPOINT_VERSION {
            return Err(Error::State(format!("checkpoint version {} is not supported", m.version)));
        }
        Ok(m)
    }

    /// Errors unless the checkpoint was written under `cfg`.
    pub fn check_hash(&self, cfg: &RunConfig) -> Result<()> {
        let hash = cfg.hash();
        if self.config_hash != hash {
            return Err(Error::State(format!(
                "checkpoint config hash {} does not match {}",
                &self.config_hash[..16.min(self.config_hash.len())],
                &hash[..16]
            )));
        }
        Ok(())
    }
}

/// Loads both networks from a checkpoint directory. Only the network
/// layout has to match `cfg`.
pub fn load_models(dir: &Path, cfg: &RunConfig) -> Result<(Models, CheckpointManifest)> {
    let manifest = CheckpointManifest::load(dir)?;
    if manifest.blur_skip != cfg.network.blur_skip {
        return Err(Error::State("checkpoint blur_skip setting differs from the config".into()));
    }
    let mut models = Models::new(cfg);
    load_tensors(&dir.join(PARAMS_FILE), &mut [("sr", &mut models.sr.params), ("seg", &mut models.seg.params)])
        .map_err(|e| Error::State(format!("{}: {e}", dir.display())))?;
    Ok((models, manifest))
}

impl Trainer {
    pub fn save_checkpoint(&self, dir: &Path, summary: CheckpointSummary) -> Result<CheckpointManifest> {
        std::fs::create_dir_all(dir)?;
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            stage: self.plan.stage.number(),
            freeze_sr: self.plan.freeze_sr(),
            iteration: self.iteration,
            total: self.total,
            config_hash: self.cfg.hash(),
            seed: self.cfg.train.seed,
            blur_skip: self.cfg.network.blur_skip,
            summary,
        };
        let meta = HashMap::from([
            ("config_hash".to_string(), manifest.config_hash.clone()),
            ("seed".to_string(), manifest.seed.to_string()),
            ("iteration".to_string(), manifest.iteration.to_string()),
        ]);
        save_tensors(
            &dir.join(PARAMS_FILE),
            &[("sr", &self.models.sr.params), ("seg", &self.models.seg.params)],
            meta,
        )?;
        if let Some(opt) = &self.sr_opt {
            opt.save(&dir.join("adam_sr.safetensors"))?;
        }
        if let Some(opt) = &self.seg_opt {
            opt.save(&dir.join("adam_seg.safetensors"))?;
        }
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    /// Restores a trainer mid-stage. The config hash must match.
    pub fn resume(cfg: &RunConfig, dir: &Path, data: TrainData) -> Result<Self> {
        let (models, manifest) = load_models(dir, cfg)?;
        manifest.check_hash(cfg)?;
        let stage = super::Stage::from_number(manifest.stage).map_err(|e| Error::State(e.to_string()))?;
        let plan = StagePlan::new(stage, cfg, manifest.freeze_sr)?;
        let mut t = Trainer::new(cfg, plan, models, data)?;
        let load = |opt: &mut Option<Adam>, file: &str| -> Result<()> {
            if let Some(o) = opt {
                o.load(&dir.join(file)).map_err(|e| Error::State(format!("{}: {e}", dir.display())))?;
            }
            Ok(())
        };
        load(&mut t.sr_opt, "adam_sr.safetensors")?;
        load(&mut t.seg_opt, "adam_seg.safetensors")?;
        if manifest.iteration > t.total {
            return Err(Error::State("checkpoint is past the configured iteration count".into()));
        }
        t.iteration = manifest.iteration;
        Ok(t)
    }
}
