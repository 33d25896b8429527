//! Three-stage training: SR pre-training on generic images, SR fine-tuning
//! on crack images, then joint training of both networks.

mod batch;
mod checkpoint;
mod run;

use std::time::Instant;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Sample;
use crate::error::{param, Error, Result};
use crate::imaging::{level_set, ClassProbs, Image};
use crate::losses::{
    balanced_class_weights, joint_loss, seg_loss, sr_loss_raw, BetaSchedule, LossConfig, SegComponents,
};
use crate::networks::{Adam, Gradients, Graph, ParamSet, SegNet, SrNet, Tensor, Var};
use crate::weighting::{item_weights, ItemWeights};

pub use batch::{Batch, BatchItem};
pub use checkpoint::{load_models, CheckpointManifest, CheckpointSummary};
pub use run::{checkpoint_name, run_stage, stage_dir, StageOutcome, StageRequest};

fn default_step1() -> usize {
    200
}
fn default_step2() -> usize {
    100
}
fn default_step3() -> usize {
    500
}
fn default_batch() -> usize {
    4
}
fn default_patch() -> usize {
    64
}
fn default_lr_pretrain() -> f64 {
    1e-3
}
fn default_lr_finetune() -> f64 {
    5e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Optimizer settings and iteration counts (desk-scale defaults).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_step1")]
    pub step1_iterations: usize,
    #[serde(default = "default_step2")]
    pub step2_iterations: usize,
    #[serde(default = "default_step3")]
    pub step3_iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// HR crop side; must be a multiple of 4 and at least 64.
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Learning rate of stage 1.
    #[serde(default = "default_lr_pretrain")]
    pub lr_pretrain: f64,
    /// Learning rate of stages 2 and 3.
    #[serde(default = "default_lr_finetune")]
    pub lr_finetune: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    /// Checkpoint interval in iterations; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step1_iterations == 0 || self.step2_iterations == 0 || self.step3_iterations == 0 {
            return param("iterations must be positive");
        }
        if self.batch_size == 0 {
            return param("batch_size must be at least 1");
        }
        if self.patch < 64 || !self.patch.is_multiple_of(4) {
            return param("patch must be a multiple of 4 and at least 64");
        }
        for (n, v) in
            [("lr_pretrain", self.lr_pretrain), ("lr_finetune", self.lr_finetune), ("adam_eps", self.adam_eps)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return param(format!("{n} must be positive"));
            }
        }
        for (n, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return param(format!("{n} must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn iterations(&self, stage: Stage) -> usize {
        match stage {
            Stage::Pretrain => self.step1_iterations,
            Stage::SrFinetune => self.step2_iterations,
            Stage::Joint => self.step3_iterations,
        }
    }

    pub fn lr(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Pretrain => self.lr_pretrain,
            _ => self.lr_finetune,
        }
    }
}

/// Task weight at `iteration` of `total`.
pub fn beta_at(iteration: usize, total: usize, schedule: &BetaSchedule) -> Result<f64> {
    if total == 0 || iteration > total {
        return param(format!("iteration {iteration} outside 0..={total}"));
    }
    Ok(match *schedule {
        BetaSchedule::Fixed(b) => b,
        BetaSchedule::Increasing => iteration as f64 / total as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// SR network alone on generic images.
    Pretrain,
    /// SR network alone on crack images; segmentation frozen.
    SrFinetune,
    /// Both networks on the joint loss.
    Joint,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Pretrain => 1,
            Stage::SrFinetune => 2,
            Stage::Joint => 3,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Pretrain),
            2 => Ok(Stage::SrFinetune),
            3 => Ok(Stage::Joint),
            _ => param(format!("unknown training step {n}")),
        }
    }
}

/// Which parameters a stage updates and how the losses are weighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub train_sr: bool,
    pub train_seg: bool,
    pub beta: BetaSchedule,
}

impl StagePlan {
    /// `freeze_sr` turns stage 3 into the separately-trained baseline:
    /// fixed SR network, segmentation on its outputs with `beta = 1`.
    pub fn new(stage: Stage, cfg: &RunConfig, freeze_sr: bool) -> Result<Self> {
        match (stage, freeze_sr) {
            (Stage::Joint, true) => {
                Ok(Self { stage, train_sr: false, train_seg: true, beta: BetaSchedule::Fixed(1.0) })
            }
            (Stage::Joint, false) => Ok(Self { stage, train_sr: true, train_seg: true, beta: cfg.loss.beta }),
            (_, true) => param("freeze_sr applies only to step 3"),
            (s, false) => Ok(Self { stage: s, train_sr: true, train_seg: false, beta: BetaSchedule::Fixed(0.0) }),
        }
    }

    pub fn freeze_sr(&self) -> bool {
        self.stage == Stage::Joint && !self.train_sr
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    #[serde(rename = "L_J")]
    pub l_j: f64,
    #[serde(rename = "L_S")]
    pub l_s: f64,
    /// Absent in stage 1, which has no masks.
    #[serde(rename = "L_C")]
    pub l_c: Option<f64>,
    pub beta: f64,
    pub lr: f64,
    pub wallclock_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<SegComponents>,
}

/// The two networks.
#[derive(Clone, Debug)]
pub struct Models {
    pub sr: SrNet,
    pub seg: SegNet,
}

impl Models {
    pub fn new(cfg: &RunConfig) -> Self {
        let seed = cfg.train.seed;
        Self {
            sr: SrNet::new(&cfg.network, crate::degradation::derive_seed(seed, 0x5e_0001)),
            seg: SegNet::new(&cfg.network, crate::degradation::derive_seed(seed, 0x5e_0002)),
        }
    }
}

/// Training images of a stage.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Generic images without masks (stage 1).
    Generic(Vec<Image>),
    Cracks(Vec<Sample>),
}

impl TrainData {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Generic(v) => v.len(),
            TrainData::Cracks(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stateful trainer for one stage.
pub struct Trainer {
    cfg: RunConfig,
    loss: LossConfig,
    plan: StagePlan,
    pub models: Models,
    sr_opt: Option<Adam>,
    seg_opt: Option<Adam>,
    data: TrainData,
    iteration: usize,
    total: usize,
    /// Batch and losses of the last failed step.
    pub failure: Option<batch::FailureReport>,
}

fn make_adam(params: &ParamSet, cfg: &RunConfig, stage: Stage) -> Adam {
    let mut a = Adam::new(params, cfg.train.lr(stage));
    a.beta1 = cfg.train.adam_beta1;
    a.beta2 = cfg.train.adam_beta2;
    a.eps = cfg.train.adam_eps;
    a
}

fn seed_tensor(shape: [usize; 4], values: impl Iterator<Item = f64>) -> Result<Tensor<f32>> {
    Tensor::from_vec(shape, values.map(|v| v as f32).collect())
}

impl Trainer {
    pub fn new(cfg: &RunConfig, plan: StagePlan, models: Models, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        match (&data, plan.stage) {
            (d, _) if d.is_empty() => return Err(Error::Data("training set is empty".into())),
            (TrainData::Generic(_), Stage::SrFinetune | Stage::Joint) => {
                return Err(Error::Data("steps 2 and 3 need image/mask pairs".into()))
            }
            _ => {}
        }
        if models.seg.has_blur_skip() != cfg.network.blur_skip {
            return Err(Error::State("segmentation network does not match the blur_skip setting".into()));
        }
        let mut loss = cfg.loss.clone();
        if let (None, TrainData::Cracks(samples)) = (loss.wce_class_weights, &data) {
            loss.wce_class_weights = Some(balanced_class_weights(samples.iter().map(|s| &s.mask)));
        }
        let sr_opt = plan.train_sr.then(|| make_adam(&models.sr.params, cfg, plan.stage));
        let seg_opt = plan.train_seg.then(|| make_adam(&models.seg.params, cfg, plan.stage));
        Ok(Self {
            cfg: cfg.clone(),
            loss,
            plan,
            models,
            sr_opt,
            seg_opt,
            data,
            iteration: 0,
            total: cfg.train.iterations(plan.stage),
            failure: None,
        })
    }

    pub fn plan(&self) -> StagePlan {
        self.plan
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.total
    }

    /// Loss configuration with resolved class weights.
    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn batch(&self, iteration: usize) -> Result<Batch> {
        Batch::build(&self.cfg, self.plan.stage, iteration, &self.data)
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_done() {
            return Err(Error::State(format!("stage already completed {} iterations", self.total)));
        }
        let start = Instant::now();
        let beta = beta_at(self.iteration, self.total, &self.plan.beta)?;
        let batch = self.batch(self.iteration)?;
        let (grads, record, sr_vars, seg_vars) = self.forward_backward(&batch, beta)?;
        let Some((mut grads, mut record)) = grads.zip(record) else {
            return Err(self.fail(batch, "non-finite loss", beta));
        };
        let mut take = |vars: &[Var]| -> Vec<Option<Tensor<f32>>> { vars.iter().map(|&v| grads.take(v)).collect() };
        let sr_grads = take(&sr_vars);
        let seg_grads = take(&seg_vars);
        let finite = |gs: &[Option<Tensor<f32>>]| gs.iter().flatten().all(|t| t.all_finite());
        if !finite(&sr_grads) || !finite(&seg_grads) {
            return Err(self.fail(batch, "non-finite gradient", beta));
        }
        if let Some(opt) = &mut self.sr_opt {
            opt.step(&mut self.models.sr.params, &sr_grads);
        }
        if let Some(opt) = &mut self.seg_opt {
            opt.step(&mut self.models.seg.params, &seg_grads);
        }
        if !self.models.sr.params.all_finite() || !self.models.seg.params.all_finite() {
            return Err(self.fail(batch, "non-finite parameters after update", beta));
        }
        self.iteration += 1;
        record.step = self.iteration;
        record.wallclock_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(record)
    }

    fn fail(&mut self, batch: Batch, reason: &str, beta: f64) -> Error {
        let msg = format!("{reason} at step {} iteration {}", self.plan.stage.number(), self.iteration + 1);
        self.failure = Some(batch::FailureReport::new(self.plan.stage, self.iteration + 1, beta, reason, batch));
        Error::NonFinite(msg)
    }

    #[allow(clippy::type_complexity)]
    fn forward_backward(
        &mut self,
        batch: &Batch,
        beta: f64,
    ) -> Result<(Option<Gradients<f32>>, Option<StepRecord>, Vec<Var>, Vec<Var>)> {
        let plan = self.plan;
        let (x, up) = SrNet::prepare_inputs::<f32>(&batch.lrs())?;
        let mut g = Graph::<f32>::new();
        let sp = self.models.sr.params.bind(&mut g, plan.train_sr);
        let (xv, uv) = (g.constant(x), g.constant(up));
        let out = self.models.sr.forward(&mut g, &sp, xv, uv);
        let (seg_vars, probs) = if plan.stage == Stage::Pretrain {
            (Vec::new(), None)
        } else {
            let cp = self.models.seg.params.bind(&mut g, plan.train_seg);
            let probs = self.models.seg.forward(&mut g, &cp, out.sr, Some(out.kernel));
            (cp, Some(probs))
        };

        let n = batch.items.len();
        let sr_t = g.value(out.sr);
        let k_t = g.value(out.kernel);
        let [_, c, h, w] = sr_t.shape();
        let (mut sum_s, mut sum_c) = (0.0, 0.0);
        let mut comps = SegComponents::default();
        let mut grad_sr = Vec::with_capacity(sr_t.len());
        let mut grad_k = Vec::with_capacity(k_t.len());
        let mut grad_p = Vec::new();
        for (i, item) in batch.items.iter().enumerate() {
            let sr_i: Vec<f64> = sr_t.item(i).iter().map(|&v| v as f64).collect();
            let k_i: Vec<f64> = k_t.item(i).iter().map(|&v| v as f64).collect();
            let mut weights = ItemWeights::default();
            if let (Some(pv), Some(mask)) = (probs, &item.mask) {
                let pred = ClassProbs::new(h, w, g.value(pv).item(i).iter().map(|&v| v as f64).collect())?;
                let ls = level_set(mask);
                if plan.stage == Stage::Joint {
                    weights = item_weights(&self.cfg.weights, &self.loss, &pred, mask, &ls)?;
                }
                let sl = seg_loss(&pred, mask, &ls, &self.loss, weights.seg.as_ref())?;
                sum_c += sl.value;
                comps.boundary += sl.components.boundary / n as f64;
                comps.dice += sl.components.dice / n as f64;
                comps.gdice += sl.components.gdice / n as f64;
                comps.wce += sl.components.wce / n as f64;
                grad_p.extend(sl.grad.iter().map(|d| beta * d / n as f64));
            }
            let srl = sr_loss_raw(
                &sr_i,
                &item.hr,
                &k_i,
                &item.kernel,
                self.loss.kernel_loss_weight,
                weights.sr.as_ref(),
                (h, w),
                c,
            )?;
            sum_s += srl.value;
            grad_sr.extend(srl.grad_image.iter().map(|d| (1.0 - beta) * d / n as f64));
            grad_k.extend(srl.grad_kernel.iter().map(|d| (1.0 - beta) * d / n as f64));
        }
        let l_s = sum_s / n as f64;
        let l_c = probs.map(|_| sum_c / n as f64);
        let l_j = joint_loss(l_s, l_c.unwrap_or(0.0), beta)?;
        if !(l_j.is_finite() && l_s.is_finite() && l_c.is_none_or(f64::is_finite)) {
            return Ok((None, None, sp, seg_vars));
        }

        let mut seeds = Vec::new();
        if plan.train_sr && beta < 1.0 {
            seeds.push((out.sr, seed_tensor(sr_t.shape(), grad_sr.into_iter())?));
            seeds.push((out.kernel, seed_tensor(k_t.shape(), grad_k.into_iter())?));
        }
        if let Some(pv) = probs {
            if plan.stage == Stage::Joint && beta > 0.0 {
                seeds.push((pv, seed_tensor(g.value(pv).shape(), grad_p.into_iter())?));
            }
        }
        let grads = g.backward(seeds);
        let record = StepRecord {
            step: 0,
            stage: plan.stage.number(),
            l_j,
            l_s,
            l_c,
            beta,
            lr: self.cfg.train.lr(plan.stage),
            wallclock_ms: 0.0,
            components: l_c.map(|_| comps),
        };
        Ok((Some(grads), Some(record), sp, seg_vars))
    }

    /// Gradient norm over the SR parameters for the batch at the current
    /// iteration, without updating anything.
    pub fn sr_gradient_norm(&mut self) -> Result<f64> {
        let beta = beta_at(self.iteration, self.total, &self.plan.beta)?;
        let batch = self.batch(self.iteration)?;
        let (grads, _, sp, _) = self.forward_backward(&batch, beta)?;
        let grads = grads.ok_or_else(|| Error::NonFinite("loss is not finite".into()))?;
        Ok(sp.iter().filter_map(|&v| grads.get(v)).map(|t| t.norm().powi(2)).sum::<f64>().sqrt())
    }
}

#[cfg(test)]
mod tests;
