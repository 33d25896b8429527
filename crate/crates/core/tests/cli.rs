mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crackres::config::RunConfig;
use crackres::dataset::synth_cracks;
use crackres::experiment::{predict, test_degradation, StampedReport};
use crackres::imaging::png_io;
use crackres::trainer::load_models;

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        std::fs::write(&config, common::TINY).unwrap();
        Self { _dir: dir, root, config }
    }

    fn out(&self) -> PathBuf {
        self.root.join("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_crackres"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(self.out())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn cfg(&self) -> RunConfig {
        common::tiny(&self.out())
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn invalid_config_exits_with_2() {
    let env = Env::new();
    std::fs::write(&env.config, r#"{ "loss": { "alpha": 1.5 } }"#).unwrap();
    assert_eq!(code(&env.run(&["schema"])), 2);
    std::fs::write(&env.config, r#"{ "unknown_field": 1 }"#).unwrap();
    let o = env.run(&["schema"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_field"));
}

#[test]
fn usage_and_state_errors_exit_with_2() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["train", "--step", "2"])), 2);
    assert_eq!(code(&env.run(&["train", "--step", "1", "--baseline"])), 2);
    assert_eq!(code(&env.run(&["ablate", "--axis", "gamma"])), 2);
    assert_eq!(code(&env.run(&["train", "--step", "4"])), 2);
}

#[test]
fn missing_input_exits_with_3() {
    let env = Env::new();
    let missing = env.root.join("nope");
    assert_eq!(code(&env.run(&["degrade", s(&missing)])), 3);
}

#[test]
fn schema_is_json() {
    let env = Env::new();
    let v: serde_json::Value = serde_json::from_str(&env.ok(&["schema"])).unwrap();
    assert!(v["properties"]["loss"].is_object());
}

#[test]
fn synth_then_ingest_produces_manifest() {
    let env = Env::new();
    env.ok(&["synth", "--count", "20", "--size", "32", "--textures", "3"]);
    let data = env.out().join("synthetic");
    assert_eq!(std::fs::read_dir(data.join("images")).unwrap().count(), 20);
    assert_eq!(std::fs::read_dir(data.join("textures")).unwrap().count(), 3);
    let stdout = env.ok(&["ingest", s(&data)]);
    assert!(stdout.starts_with("20 records, 0 unpaired, 0 rejected"), "{stdout}");
    let manifest = crackres::dataset::Manifest::load(&env.out().join("manifest.json")).unwrap();
    assert_eq!(manifest.records.len(), 20);
}

#[test]
fn eval_from_prediction_pngs() {
    let env = Env::new();
    let (pred, gt) = (env.root.join("pred"), env.root.join("gt"));
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    for sample in synth_cracks(3, 32, 4).unwrap() {
        let name = format!("{}.png", sample.name);
        png_io::write_mask(&gt.join(&name), &sample.mask, &[]).unwrap();
        let prob = crackres::imaging::ProbabilityMap::new(32, 32, sample.mask.to_grid().data().to_vec()).unwrap();
        png_io::write_probability(&pred.join(&name), &prob, &[]).unwrap();
    }
    env.ok(&["eval", "--pred", s(&pred), "--gt", s(&gt)]);
    let report = StampedReport::load(&env.out().join("eval/report.json")).unwrap();
    assert_eq!(report.report.iou_max, 1.0);
    assert_eq!(report.report.hd95_min, 0.0);
    assert_eq!(report.config_hash, env.cfg().hash());
    let csv = std::fs::read_to_string(env.out().join("eval/sweep.csv")).unwrap();
    assert!(csv.starts_with("# config_hash="));
}

#[test]
fn train_eval_predict_pipeline() {
    let env = Env::new();
    env.ok(&["train", "--step", "1"]);
    env.ok(&["train", "--step", "2"]);
    let stdout = env.ok(&["train", "--step", "3"]);
    assert!(stdout.contains("step 3: 8 iterations"), "{stdout}");
    let ckpt = env.out().join("step3/ckpt_8");
    let log = std::fs::read_to_string(env.out().join("step3/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);

    env.ok(&["eval", "--checkpoint", s(&ckpt)]);
    let linked = StampedReport::load(&ckpt.join("eval_report.json")).unwrap();
    let report = StampedReport::load(&env.out().join("eval/report.json")).unwrap();
    assert_eq!(linked, report);
    assert!(report.report.psnr.is_some() && report.report.kernel_psnr.is_some());

    env.ok(&["sweep-plot", s(&env.out().join("eval/report.json"))]);
    let svg = std::fs::read_to_string(env.out().join("eval/report.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));

    // 112x112 LR input predicts at 448x448.
    let cfg = env.cfg();
    let input = env.root.join("lr");
    std::fs::create_dir_all(&input).unwrap();
    let hr = &synth_cracks(1, 448, 2).unwrap()[0].image;
    let (lr, _) = test_degradation(&cfg, 0, hr).unwrap();
    let lr_path = input.join("wall.png");
    png_io::write_image(&lr_path, &lr, png_io::Depth::Sixteen, &[]).unwrap();
    env.ok(&["predict", "--checkpoint", s(&ckpt), s(&input)]);

    let dir = env.out().join("predict");
    let (sr, _) = png_io::read_image(&dir.join("wall_sr.png")).unwrap();
    assert_eq!(sr.dims(), (448, 448));
    let prob = png_io::read_probability(&dir.join("wall_prob.png")).unwrap();
    assert_eq!(prob.dims(), (448, 448));
    let (lr_read, _) = png_io::read_image(&lr_path).unwrap();
    let (models, _) = load_models(&ckpt, &cfg).unwrap();
    let expected = predict(&models, &lr_read).unwrap().crack;
    let worst = prob.data().iter().zip(expected.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst <= 0.5 / 65535.0 + 1e-12, "probability PNG off by {worst}");

    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("predict.json")).unwrap()).unwrap();
    assert_eq!(record["threshold"].as_f64().unwrap(), linked.report.iou_threshold);
    let mask = png_io::read_mask(&dir.join("wall_mask.png")).unwrap();
    let t = linked.report.iou_threshold;
    assert!(mask.data().iter().zip(expected.data()).all(|(&m, &p)| m == (p >= t)));
}

#[test]
fn resume_and_config_mismatch() {
    let env = Env::new();
    std::fs::write(
        &env.config,
        common::TINY.replace("\"batch_size\": 2", "\"batch_size\": 2, \"checkpoint_every\": 3"),
    )
    .unwrap();
    env.ok(&["train", "--step", "1"]);
    let full = std::fs::read_to_string(env.out().join("step1/train.jsonl")).unwrap();
    let ckpt = env.out().join("step1/ckpt_3");
    env.ok(&["train", "--step", "1", "--resume", s(&ckpt)]);
    let resumed = std::fs::read_to_string(env.out().join("step1/train.jsonl")).unwrap();
    let strip = |log: &str| -> Vec<serde_json::Value> {
        log.lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wallclock_ms");
                v
            })
            .collect()
    };
    assert_eq!(strip(&full), strip(&resumed));

    std::fs::write(&env.config, common::TINY.replace("\"batch_size\": 2", "\"batch_size\": 4")).unwrap();
    assert_eq!(code(&env.run(&["train", "--step", "1", "--resume", s(&ckpt)])), 2);
}

#[test]
fn degrade_is_seeded() {
    let env = Env::new();
    let input = env.root.join("hr");
    std::fs::create_dir_all(&input).unwrap();
    let img = &synth_cracks(1, 64, 1).unwrap()[0].image;
    png_io::write_image(&input.join("a.png"), img, png_io::Depth::Eight, &[]).unwrap();
    let read = |env: &Env| std::fs::read(env.out().join("degraded/a.kernel.json")).unwrap();
    env.ok(&["--seed", "5", "degrade", s(&input)]);
    let first = read(&env);
    env.ok(&["--seed", "5", "degrade", s(&input)]);
    assert_eq!(first, read(&env));
    env.ok(&["--seed", "6", "degrade", s(&input)]);
    assert_ne!(first, read(&env));
    assert_eq!(code(&env.run(&["degrade", "--scale", "quarter", s(&input)])), 2);
}
