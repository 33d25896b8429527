//! Data resolution, evaluation of trained models, and ablation tables.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{ingest, load_split, synth_cracks, synth_textures, Manifest, Sample, Split, SplitRatios};
use crate::degradation::{degrade, derive_seed, sample_spec_in};
use crate::error::{param, Error, Result};
use crate::imaging::{png_io, BinaryMask, BlurKernel, Image, ProbabilityMap, Scale};
use crate::losses::{BetaSchedule, SegLossKind};
use crate::metrics::{default_thresholds, MetricReport, RestorationPairs};
use crate::trainer::{run_stage, Models, Stage, StageRequest, TrainData};
use crate::weighting::FoTarget;

/// Training and test pairs.
#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Crack pairs from the configured dataset, or the seeded synthetic set.
pub fn crack_data(cfg: &RunConfig) -> Result<DataSplits> {
    let s = &cfg.data.synthetic;
    let Some(path) = &cfg.data.crack else {
        let mut all = synth_cracks(s.train_count + s.test_count, s.size, s.seed)?;
        let test = all.split_off(s.train_count);
        return Ok(DataSplits { train: all, test });
    };
    let manifest = if path.is_file() { Manifest::load(path)? } else { ingest(path, s.seed, SplitRatios::default())? };
    let train = load_split(&manifest, Split::Train)?;
    let mut test = load_split(&manifest, Split::Test)?;
    if test.is_empty() {
        test = load_split(&manifest, Split::Val)?;
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("dataset needs both training and test pairs".into()));
    }
    Ok(DataSplits { train, test })
}

/// Reads every PNG in `dir`, sorted by name.
pub fn read_png_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), png_io::read_image(p)?.0)))
        .collect()
}

/// Generic images for stage 1.
pub fn pretrain_data(cfg: &RunConfig) -> Result<Vec<Image>> {
    let s = &cfg.data.synthetic;
    let images = match &cfg.data.pretrain {
        Some(dir) => read_png_dir(dir)?.into_iter().map(|(_, i)| i).collect(),
        None => synth_textures(s.pretrain_count, s.size, s.seed)?,
    };
    if images.is_empty() {
        return Err(Error::Data("pre-training corpus is empty".into()));
    }
    Ok(images)
}

/// Training data of a stage.
pub fn stage_data(cfg: &RunConfig, stage: Stage) -> Result<TrainData> {
    Ok(match stage {
        Stage::Pretrain => TrainData::Generic(pretrain_data(cfg)?),
        _ => TrainData::Cracks(crack_data(cfg)?.train),
    })
}

/// Deterministic x4 degradation of test image `index`; depends only on
/// the data seed, so every run sees the same test inputs.
pub fn test_degradation(cfg: &RunConfig, index: usize, hr: &Image) -> Result<(Image, BlurKernel)> {
    let seed = derive_seed(cfg.data.synthetic.seed ^ 0x7e57_0000, index as u64);
    degrade(hr, &sample_spec_in(seed, cfg.degradation.range(), Scale::QUARTER))
}

/// Predictions of both networks on one LR image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub sr: Image,
    pub kernel: BlurKernel,
    pub crack: ProbabilityMap,
}

pub fn predict(models: &Models, lr: &Image) -> Result<Prediction> {
    let (sr, kernel) = models.sr.infer(lr)?;
    let crack = models.seg.infer(&sr, Some(&kernel))?.crack();
    Ok(Prediction { sr, kernel, crack })
}

fn rgb(img: &Image) -> Image {
    if img.channels() == 3 {
        return img.clone();
    }
    let (h, w) = img.dims();
    Image::new(h, w, 3, img.plane(0).repeat(3)).expect("replicated planes")
}

/// Metric report of `models` on degraded test pairs.
pub fn evaluate(models: &Models, test: &[Sample], cfg: &RunConfig) -> Result<MetricReport> {
    let mut names = Vec::new();
    let mut preds = Vec::new();
    let mut gts: Vec<BinaryMask> = Vec::new();
    let mut hrs = Vec::new();
    let mut gks = Vec::new();
    let mut outs = Vec::new();
    for (i, s) in test.iter().enumerate() {
        let hr = rgb(&s.image);
        let (lr, gk) = test_degradation(cfg, i, &hr)?;
        let p = predict(models, &lr)?;
        names.push(s.name.clone());
        preds.push(p.crack.clone());
        gts.push(s.mask.clone());
        hrs.push(hr);
        gks.push(gk);
        outs.push(p);
    }
    let restoration = RestorationPairs {
        images: outs.iter().zip(&hrs).map(|(p, h)| (&p.sr, h)).collect(),
        kernels: outs.iter().zip(&gks).map(|(p, k)| (&p.kernel, k)).collect(),
    };
    MetricReport::compute(&names, &preds, &gts, &default_thresholds(), &restoration)
}

/// Runs steps 1 and 2 under `cfg.output_dir` and returns the resulting
/// networks.
pub fn pretrain_sr(cfg: &RunConfig) -> Result<Models> {
    run_stage(cfg, &StageRequest::new(Stage::Pretrain), stage_data(cfg, Stage::Pretrain)?)?;
    let out = run_stage(cfg, &StageRequest::new(Stage::SrFinetune), stage_data(cfg, Stage::SrFinetune)?)?;
    Ok(out.models)
}

/// Step 3 from the SR network of `from` with a segmentation network
/// freshly initialized for `cfg`. `freeze_sr` trains the baseline.
pub fn train_step3(cfg: &RunConfig, from: &Models, train: &[Sample], freeze_sr: bool) -> Result<Models> {
    let mut models = Models::new(cfg);
    models.sr = from.sr.clone();
    let req = StageRequest { freeze_sr, init_models: Some(models), ..StageRequest::new(Stage::Joint) };
    Ok(run_stage(cfg, &req, TrainData::Cracks(train.to_vec()))?.models)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Beta,
    Loss,
    Weights,
    BlurSkip,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Self::Beta),
            "loss" => Ok(Self::Loss),
            "weights" => Ok(Self::Weights),
            "blur_skip" | "blur-skip" => Ok(Self::BlurSkip),
            _ => param(format!("unknown ablation axis {s:?}; expected beta, loss, weights or blur_skip")),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Loss => "loss",
            Self::Weights => "weights",
            Self::BlurSkip => "blur_skip",
        }
    }

    /// Labelled config variants, one per table row.
    pub fn variants(self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let with = |f: &dyn Fn(&mut RunConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Beta => [0.1, 0.3, 0.5, 0.7, 0.9, 1.0]
                .into_iter()
                .map(BetaSchedule::Fixed)
                .chain([BetaSchedule::Increasing])
                .map(|b| (b.label(), with(&|c| c.loss.beta = b)))
                .collect(),
            Self::Loss => {
                SegLossKind::ALL.iter().map(|&k| (k.name().to_string(), with(&|c| c.loss.loss = k))).collect()
            }
            Self::Weights => {
                let none = |c: &mut RunConfig| {
                    c.weights.use_lc_weight = false;
                    c.weights.use_co_weight = false;
                    c.weights.use_fo_weight = false;
                };
                vec![
                    ("none".into(), with(&none)),
                    (
                        "L_C".into(),
                        with(&|c| {
                            none(c);
                            c.weights.use_lc_weight = true;
                        }),
                    ),
                    (
                        "w^C (m_C=8)".into(),
                        with(&|c| {
                            none(c);
                            c.weights.use_co_weight = true;
                            c.weights.m_c = 8.0;
                        }),
                    ),
                    (
                        "w^F (m_F=1)".into(),
                        with(&|c| {
                            none(c);
                            c.weights.use_fo_weight = true;
                            c.weights.m_f = 1.0;
                            c.weights.fo_target = FoTarget::SrLoss;
                        }),
                    ),
                    (
                        "w^F (m_F=0.5) on L_C".into(),
                        with(&|c| {
                            none(c);
                            c.weights.use_fo_weight = true;
                            c.weights.m_f = 0.5;
                            c.weights.fo_target = FoTarget::SegLoss;
                        }),
                    ),
                ]
            }
            Self::BlurSkip => [false, true]
                .into_iter()
                .map(|b| (if b { "on" } else { "off" }.to_string(), with(&|c| c.network.blur_skip = b)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub config_hash: String,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,IoU_max,AIU,HD95_min,AHD95,PSNR,SSIM,kernel_PSNR\n");
        for r in &self.rows {
            let m = &r.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.setting.replace(',', ";"),
                m.iou_max,
                m.aiu,
                m.hd95_min,
                m.ahd95,
                opt(m.psnr),
                opt(m.ssim),
                opt(m.kernel_psnr)
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect()
}

/// Trains steps 1 and 2 once, then step 3 for every setting of `axis`,
/// and evaluates each on the test split.
pub fn run_ablation(cfg: &RunConfig, axis: AblationAxis) -> Result<AblationTable> {
    let data = crack_data(cfg)?;
    let mut shared = cfg.clone();
    shared.output_dir = cfg.output_dir.join("ablation").join("shared");
    let base = pretrain_sr(&shared)?;
    let rows = axis
        .variants(cfg)
        .into_iter()
        .map(|(setting, mut row)| {
            row.output_dir = cfg.output_dir.join("ablation").join(axis.name()).join(slug(&setting));
            let models = train_step3(&row, &base, &data.train, false)?;
            let report = evaluate(&models, &data.test, &row)?;
            log::info!("{} = {setting}: AIU {:.4}", axis.name(), report.aiu);
            Ok(AblationRow { setting, config_hash: row.hash(), report })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { axis, config_hash: cfg.hash(), seed: cfg.train.seed, rows })
}

/// A metric report tagged with the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StampedReport {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: MetricReport,
}

impl StampedReport {
    pub fn new(cfg: &RunConfig, report: MetricReport) -> Self {
        Self { config_hash: cfg.hash(), seed: cfg.train.seed, report }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Per-threshold CSV preceded by a comment line with hash and seed.
    pub fn sweep_csv(&self) -> String {
        format!("# config_hash={} seed={}\n{}", self.config_hash, self.seed, self.report.sweep_csv())
    }
}
