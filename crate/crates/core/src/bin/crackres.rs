use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crackres::config::{self, RunConfig};
use crackres::dataset::{ingest, synth_cracks, synth_textures, write_samples, SplitRatios};
use crackres::degradation::{degrade, derive_seed, sample_spec_in, Sidecar};
use crackres::experiment::{crack_data, evaluate, predict, run_ablation, stage_data, AblationAxis, StampedReport};
use crackres::imaging::{png_io, BinaryMask, Scale};
use crackres::metrics::{default_thresholds, MetricReport, RestorationPairs};
use crackres::plot::sweep_svg;
use crackres::trainer::{load_models, run_stage, CheckpointManifest, Stage, StageRequest};
use crackres::Error;

#[derive(Parser)]
#[command(name = "crackres", version, about = "Joint blind super-resolution and crack segmentation")]
struct Cli {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Blur and downsample HR PNGs, writing LR PNGs and kernel sidecars.
    Degrade {
        /// PNG file or directory of PNGs.
        input: PathBuf,
        #[arg(long, default_value = "1/4")]
        scale: Scale,
    },
    /// Run one training step.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        step: u8,
        /// Continue from a checkpoint of the same step.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start from this checkpoint instead of the previous step's final one.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Step 3 only: keep the SR network fixed and train segmentation alone.
        #[arg(long)]
        baseline: bool,
    },
    /// Score probability maps against masks, or a checkpoint on the test split.
    Eval {
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        checkpoint: Option<PathBuf>,
        /// Directory of probability PNGs named like the masks.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth mask PNGs.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
    },
    /// Super-resolve and segment LR PNGs with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG file or directory of PNGs.
        input: PathBuf,
        /// Binarization threshold; defaults to the IoU_max threshold of the
        /// checkpoint's eval report, else 0.5.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Render the IoU and HD95 threshold curves of a report as SVG.
    SweepPlot {
        report: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and evaluate every setting along one axis.
    Ablate {
        /// beta, loss, weights or blur_skip
        #[arg(long)]
        axis: String,
    },
    /// Write a seeded synthetic crack dataset (images/ and masks/).
    Synth {
        #[arg(long, default_value_t = 80)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also write generic textures under textures/.
        #[arg(long, default_value_t = 0)]
        textures: usize,
    },
    /// Pair images/ and masks/ under a root and write a manifest.
    Ingest { root: PathBuf },
    /// Print the JSON schema of the run configuration.
    Schema,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stamp(cfg: &RunConfig) -> Vec<(&'static str, String)> {
    vec![("config_hash", cfg.hash()), ("seed", cfg.train.seed.to_string())]
}

fn pngs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", input.display())).into());
    }
    Ok(v)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn write_report(cfg: &RunConfig, report: MetricReport, dir: &Path) -> Result<StampedReport> {
    std::fs::create_dir_all(dir)?;
    let stamped = StampedReport::new(cfg, report);
    std::fs::write(dir.join("report.json"), stamped.to_json()?)?;
    std::fs::write(dir.join("sweep.csv"), stamped.sweep_csv())?;
    Ok(stamped)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    match cli.command {
        Command::Degrade { input, scale } => {
            let dir = out.join("degraded");
            std::fs::create_dir_all(&dir)?;
            for (i, path) in pngs(&input)?.iter().enumerate() {
                let (hr, depth) = png_io::read_image(path)?;
                let spec = sample_spec_in(derive_seed(cfg.train.seed, i as u64), cfg.degradation.range(), scale);
                let (lr, kernel) = degrade(&hr, &spec)?;
                let name = stem(path);
                png_io::write_image(&dir.join(format!("{name}.png")), &lr, depth, &stamp(&cfg))?;
                let sidecar = serde_json::to_string_pretty(&Sidecar::new(&spec, &kernel))?;
                std::fs::write(dir.join(format!("{name}.kernel.json")), sidecar)?;
                println!("{name}: {}x{} -> {}x{}", hr.height(), hr.width(), lr.height(), lr.width());
            }
        }
        Command::Train { step, resume, init, baseline } => {
            let stage = Stage::from_number(step)?;
            if baseline && stage != Stage::Joint {
                bail!(Error::Config("--baseline applies only to --step 3".into()));
            }
            let req = StageRequest { freeze_sr: baseline, init, resume, ..StageRequest::new(stage) };
            let outcome = run_stage(&cfg, &req, stage_data(&cfg, stage)?)?;
            if let Some(last) = outcome.records.last() {
                println!("step {step}: {} iterations, final L_J {:.6}", last.step, last.l_j);
            }
            println!("checkpoint: {}", outcome.final_checkpoint.display());
        }
        Command::Eval { checkpoint, pred, gt } => {
            let report = match (checkpoint, pred, gt) {
                (Some(ckpt), _, _) => {
                    let (models, manifest) = load_models(&ckpt, &cfg)?;
                    manifest.check_hash(&cfg)?;
                    let report = evaluate(&models, &crack_data(&cfg)?.test, &cfg)?;
                    let stamped = StampedReport::new(&cfg, report.clone());
                    std::fs::write(ckpt.join("eval_report.json"), stamped.to_json()?)?;
                    report
                }
                (None, Some(pred), Some(gt)) => {
                    let masks = pngs(&gt)?;
                    let mut names = Vec::new();
                    let (mut preds, mut gts) = (Vec::new(), Vec::new());
                    for m in &masks {
                        let name = stem(m);
                        let p = pred.join(format!("{name}.png"));
                        if !p.exists() {
                            return Err(Error::Data(format!("no prediction for {name} in {}", pred.display())).into());
                        }
                        preds.push(png_io::read_probability(&p)?);
                        gts.push(png_io::read_mask(m)?);
                        names.push(name);
                    }
                    MetricReport::compute(&names, &preds, &gts, &default_thresholds(), &RestorationPairs::default())?
                }
                _ => bail!(Error::Config("eval needs --checkpoint or both --pred and --gt".into())),
            };
            let stamped = write_report(&cfg, report, &out.join("eval"))?;
            let r = &stamped.report;
            println!("IoU_max {:.4} AIU {:.4} HD95_min {:.3} AHD95 {:.3}", r.iou_max, r.aiu, r.hd95_min, r.ahd95);
            if let (Some(p), Some(s)) = (r.psnr, r.ssim) {
                println!("PSNR {p:.3} SSIM {s:.4}");
            }
        }
        Command::Predict { checkpoint, input, threshold } => {
            let manifest = CheckpointManifest::load(&checkpoint)?;
            manifest.check_hash(&cfg)?;
            let (models, _) = load_models(&checkpoint, &cfg)?;
            let linked = checkpoint.join("eval_report.json");
            let (threshold, source) = match threshold {
                Some(t) if t > 0.0 && t < 1.0 => (t, "argument".to_string()),
                Some(t) => bail!(Error::Config(format!("threshold {t} outside (0, 1)"))),
                None if linked.exists() => {
                    (StampedReport::load(&linked)?.report.iou_threshold, linked.display().to_string())
                }
                None => (0.5, "default".to_string()),
            };
            let dir = out.join("predict");
            std::fs::create_dir_all(&dir)?;
            let mut meta = stamp(&cfg);
            meta.push(("threshold", threshold.to_string()));
            let mut files = Vec::new();
            for path in pngs(&input)? {
                let (lr, _) = png_io::read_image(&path)?;
                let p = predict(&models, &lr)?;
                let name = stem(&path);
                png_io::write_image(&dir.join(format!("{name}_sr.png")), &p.sr, png_io::Depth::Sixteen, &meta)?;
                png_io::write_probability(&dir.join(format!("{name}_prob.png")), &p.crack, &meta)?;
                png_io::write_mask(
                    &dir.join(format!("{name}_mask.png")),
                    &BinaryMask::threshold(p.crack.grid(), threshold),
                    &meta,
                )?;
                println!("{name}: {}x{} -> {}x{}", lr.height(), lr.width(), p.sr.height(), p.sr.width());
                files.push(name);
            }
            let record = serde_json::json!({
                "config_hash": cfg.hash(),
                "seed": cfg.train.seed,
                "threshold": threshold,
                "threshold_source": source,
                "files": files,
            });
            std::fs::write(dir.join("predict.json"), serde_json::to_string_pretty(&record)?)?;
        }
        Command::SweepPlot { report, output } => {
            let stamped = StampedReport::load(&report)?;
            let meta = [("config_hash", stamped.config_hash.clone()), ("seed", stamped.seed.to_string())];
            let svg = sweep_svg(&stamped.report, &meta);
            let path = output.unwrap_or_else(|| report.with_extension("svg"));
            std::fs::write(&path, svg)?;
            println!("{}", path.display());
        }
        Command::Ablate { axis } => {
            let axis: AblationAxis = axis.parse()?;
            let table = run_ablation(&cfg, axis)?;
            std::fs::create_dir_all(&out)?;
            let base = out.join(format!("ablation_{}", axis.name()));
            let csv = format!("# config_hash={} seed={}\n{}", table.config_hash, table.seed, table.to_csv());
            std::fs::write(base.with_extension("csv"), &csv)?;
            std::fs::write(base.with_extension("json"), table.to_json()?)?;
            print!("{}", table.to_csv());
        }
        Command::Synth { count, size, textures } => {
            let seed = cfg.data.synthetic.seed;
            let dir = out.join("synthetic");
            write_samples(&dir, &synth_cracks(count, size, seed)?)?;
            if textures > 0 {
                let tdir = dir.join("textures");
                std::fs::create_dir_all(&tdir)?;
                for (i, t) in synth_textures(textures, size, seed)?.iter().enumerate() {
                    png_io::write_image(&tdir.join(format!("texture_{i:05}.png")), t, png_io::Depth::Eight, &[])?;
                }
            }
            println!("{}", dir.display());
        }
        Command::Ingest { root } => {
            let manifest = ingest(&root, cfg.data.synthetic.seed, SplitRatios::default())?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("manifest.json");
            manifest.save(&path)?;
            println!(
                "{} records, {} unpaired, {} rejected",
                manifest.records.len(),
                manifest.unpaired.len(),
                manifest.rejected.len()
            );
        }
        Command::Schema => println!("{}", config::schema()),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::State(_) | Error::Param(_)) => 2,
        Some(Error::NonFinite(_)) => 4,
        Some(_) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli).context("crackres failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
