use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::checkpoint::{load_models, CheckpointSummary};
use super::{Models, Stage, StagePlan, StepRecord, TrainData, Trainer};
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Output directory of a stage: `<output_dir>/step<n>`, with a
/// `-baseline` suffix for the frozen-SR variant of step 3.
pub fn stage_dir(cfg: &RunConfig, stage: Stage, freeze_sr: bool) -> PathBuf {
    let suffix = if freeze_sr { "-baseline" } else { "" };
    cfg.output_dir.join(format!("step{}{suffix}", stage.number()))
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration}")
}

/// What to run.
#[derive(Clone, Debug)]
pub struct StageRequest {
    pub stage: Stage,
    pub freeze_sr: bool,
    /// Checkpoint to start from; defaults to the final checkpoint of the
    /// previous step under the same output directory.
    pub init: Option<PathBuf>,
    /// Checkpoint of this stage to continue from.
    pub resume: Option<PathBuf>,
    /// In-memory starting point; takes precedence over `init`.
    pub init_models: Option<Models>,
}

impl StageRequest {
    pub fn new(stage: Stage) -> Self {
        Self { stage, freeze_sr: false, init: None, resume: None, init_models: None }
    }
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub dir: PathBuf,
    pub final_checkpoint: PathBuf,
    /// Steps run by this invocation.
    pub records: Vec<StepRecord>,
    pub models: Models,
}

fn default_init(cfg: &RunConfig, stage: Stage) -> Option<PathBuf> {
    let prev = match stage {
        Stage::Pretrain => return None,
        Stage::SrFinetune => Stage::Pretrain,
        Stage::Joint => Stage::SrFinetune,
    };
    Some(stage_dir(cfg, prev, false).join(checkpoint_name(cfg.train.iterations(prev))))
}

/// Keeps log lines up to `iteration`, so a resumed run continues a
/// monotone log.
fn truncate_log(path: &Path, iteration: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(std::fs::File::open(path)?).lines() {
        let line = line?;
        let rec: StepRecord =
            serde_json::from_str(&line).map_err(|e| Error::State(format!("corrupt log line: {e}")))?;
        if rec.step <= iteration {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

/// Runs (or resumes) one stage, writing `train.jsonl` and checkpoints.
/// A non-finite step writes `failure/` next to the log and aborts.
pub fn run_stage(cfg: &RunConfig, req: &StageRequest, data: TrainData) -> Result<StageOutcome> {
    let dir = stage_dir(cfg, req.stage, req.freeze_sr);
    std::fs::create_dir_all(&dir)?;
    let log_path = dir.join("train.jsonl");
    let mut trainer = match &req.resume {
        Some(ckpt) => {
            let t = Trainer::resume(cfg, ckpt, data)?;
            if t.plan().stage != req.stage || t.plan().freeze_sr() != req.freeze_sr {
                return Err(Error::State(format!("{} belongs to a different step", ckpt.display())));
            }
            truncate_log(&log_path, t.iteration())?;
            t
        }
        None => {
            let init = req.init.clone().or_else(|| default_init(cfg, req.stage));
            let models = match (req.init_models.clone(), init) {
                (Some(m), _) => m,
                (None, Some(init)) => {
                    if !init.join("manifest.json").exists() {
                        return Err(Error::State(format!("missing checkpoint {}", init.display())));
                    }
                    load_models(&init, cfg)?.0
                }
                (None, None) => Models::new(cfg),
            };
            std::fs::write(&log_path, "")?;
            Trainer::new(cfg, StagePlan::new(req.stage, cfg, req.freeze_sr)?, models, data)?
        }
    };
    let mut log = OpenOptions::new().append(true).create(true).open(&log_path)?;
    let mut records = Vec::new();
    let mut since_ckpt = Vec::new();
    let every = cfg.train.checkpoint_every;
    while !trainer.is_done() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                if let Some(f) = &trainer.failure {
                    f.write(&dir.join("failure"))?;
                }
                return Err(e);
            }
        };
        writeln!(log, "{}", serde_json::to_string(&rec)?)?;
        log::debug!("step {} L_J {:.5}", rec.step, rec.l_j);
        since_ckpt.push(rec.clone());
        records.push(rec);
        let it = trainer.iteration();
        if (every > 0 && it % every == 0) || trainer.is_done() {
            trainer.save_checkpoint(&dir.join(checkpoint_name(it)), CheckpointSummary::from_records(&since_ckpt))?;
            since_ckpt.clear();
        }
    }
    let final_checkpoint = dir.join(checkpoint_name(trainer.total()));
    Ok(StageOutcome { dir, final_checkpoint, records, models: trainer.models })
}
