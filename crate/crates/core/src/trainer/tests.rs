use super::*;
use crate::dataset::{synth_cracks, synth_textures};
use crate::experiment::{evaluate, stage_data};

fn tiny(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.network.sr_features = 8;
    c.network.sr_blocks = 1;
    c.network.kernel_hidden = 8;
    c.network.seg_widths = [4, 4, 8];
    c.network.kernel_embed = 4;
    c.train.batch_size = 2;
    c.train.step1_iterations = 6;
    c.train.step2_iterations = 4;
    c.train.step3_iterations = 6;
    c.data.synthetic.train_count = 6;
    c.data.synthetic.test_count = 3;
    c.data.synthetic.pretrain_count = 4;
    c.output_dir = dir.to_path_buf();
    c
}

fn cracks(n: usize) -> TrainData {
    TrainData::Cracks(synth_cracks(n, 64, 5).unwrap())
}

#[test]
fn beta_examples() {
    assert_eq!(beta_at(0, 10, &BetaSchedule::Increasing).unwrap(), 0.0);
    assert_eq!(beta_at(5, 10, &BetaSchedule::Increasing).unwrap(), 0.5);
    assert_eq!(beta_at(10, 10, &BetaSchedule::Increasing).unwrap(), 1.0);
    for i in [0, 3, 10] {
        assert_eq!(beta_at(i, 10, &BetaSchedule::Fixed(0.3)).unwrap(), 0.3);
    }
    assert!(beta_at(11, 10, &BetaSchedule::Increasing).is_err());
    assert!(beta_at(0, 0, &BetaSchedule::Increasing).is_err());
}

#[test]
fn config_defaults_and_validation() {
    let t = TrainConfig::default();
    assert_eq!((t.step1_iterations, t.step2_iterations, t.step3_iterations, t.batch_size), (200, 100, 500, 4));
    assert_eq!((t.adam_beta1, t.adam_beta2, t.adam_eps), (0.9, 0.999, 1e-8));
    assert!(TrainConfig { batch_size: 0, ..t.clone() }.validate().is_err());
    assert!(TrainConfig { step3_iterations: 0, ..t.clone() }.validate().is_err());
    assert!(TrainConfig { patch: 60, ..t }.validate().is_err());
}

#[test]
fn empty_or_wrong_data_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let plan = StagePlan::new(Stage::Pretrain, &cfg, false).unwrap();
    assert!(matches!(Trainer::new(&cfg, plan, Models::new(&cfg), TrainData::Generic(vec![])), Err(Error::Data(_))));
    let plan = StagePlan::new(Stage::Joint, &cfg, false).unwrap();
    let textures = TrainData::Generic(synth_textures(2, 64, 0).unwrap());
    assert!(matches!(Trainer::new(&cfg, plan, Models::new(&cfg), textures), Err(Error::Data(_))));
    assert!(StagePlan::new(Stage::SrFinetune, &cfg, true).is_err());
}

#[test]
fn batches_are_deterministic_and_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let data = cracks(4);
    let a = Batch::build(&cfg, Stage::Joint, 3, &data).unwrap();
    let b = Batch::build(&cfg, Stage::Joint, 3, &data).unwrap();
    let c = Batch::build(&cfg, Stage::Joint, 4, &data).unwrap();
    assert_eq!(a.items.len(), 2);
    for (x, y) in a.items.iter().zip(&b.items) {
        assert_eq!((x.index, x.seed, &x.hr, &x.lr, &x.mask), (y.index, y.seed, &y.hr, &y.lr, &y.mask));
        assert_eq!(x.hr.dims(), (64, 64));
        assert_eq!(x.lr.dims(), (16, 16));
    }
    assert_ne!(a.items[0].seed, c.items[0].seed);
}

#[test]
fn joint_log_recomposes_and_follows_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    for beta in [BetaSchedule::Fixed(0.3), BetaSchedule::Increasing] {
        cfg.loss.beta = beta;
        let plan = StagePlan::new(Stage::Joint, &cfg, false).unwrap();
        let mut t = Trainer::new(&cfg, plan, Models::new(&cfg), cracks(4)).unwrap();
        for i in 0..cfg.train.step3_iterations {
            let r = t.step().unwrap();
            let lc = r.l_c.unwrap();
            assert!(((1.0 - r.beta) * r.l_s + r.beta * lc - r.l_j).abs() <= 1e-9);
            assert_eq!(r.beta, beta_at(i, cfg.train.step3_iterations, &beta).unwrap());
            assert_eq!(r.step, i + 1);
        }
        assert!(matches!(t.step(), Err(Error::State(_))));
    }
}

#[test]
fn sr_gradient_is_nonzero_in_joint_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let plan = StagePlan::new(Stage::Joint, &cfg, false).unwrap();
    let mut t = Trainer::new(&cfg, plan, Models::new(&cfg), cracks(4)).unwrap();
    assert!(t.sr_gradient_norm().unwrap() > 0.0);

    let mut frozen = cfg.clone();
    frozen.loss.beta = BetaSchedule::Fixed(1.0);
    let plan = StagePlan::new(Stage::Joint, &frozen, true).unwrap();
    let mut t = Trainer::new(&frozen, plan, Models::new(&frozen), cracks(4)).unwrap();
    assert_eq!(t.sr_gradient_norm().unwrap(), 0.0);
}

#[test]
fn stages_chain_and_step2_leaves_segmentation_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert!(matches!(
        run_stage(&cfg, &StageRequest::new(Stage::SrFinetune), stage_data(&cfg, Stage::SrFinetune).unwrap()),
        Err(Error::State(_))
    ));
    let s1 = run_stage(&cfg, &StageRequest::new(Stage::Pretrain), stage_data(&cfg, Stage::Pretrain).unwrap()).unwrap();
    assert!(s1.records.iter().all(|r| r.l_c.is_none() && r.beta == 0.0 && r.l_j == r.l_s));
    let s2 =
        run_stage(&cfg, &StageRequest::new(Stage::SrFinetune), stage_data(&cfg, Stage::SrFinetune).unwrap()).unwrap();
    assert_eq!(s2.records.len(), 4);
    assert!(s2.records.iter().all(|r| r.beta == 0.0 && r.l_c.is_some()));
    assert_eq!(s2.models.seg.params.tensors(), s1.models.seg.params.tensors());
    assert_eq!(s2.models.seg.params.tensors(), Models::new(&cfg).seg.params.tensors());
    assert_ne!(s2.models.sr.params.tensors(), s1.models.sr.params.tensors());

    let s3 = run_stage(&cfg, &StageRequest::new(Stage::Joint), stage_data(&cfg, Stage::Joint).unwrap()).unwrap();
    assert_ne!(s3.models.seg.params.tensors(), s2.models.seg.params.tensors());
    assert!(s3.final_checkpoint.join("manifest.json").exists());

    // The log on disk matches the returned records and is monotone.
    let log = std::fs::read_to_string(s3.dir.join("train.jsonl")).unwrap();
    let logged: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logged.len(), 6);
    assert!(logged.windows(2).all(|w| w[0].step < w[1].step));
    assert!(logged.iter().zip(&s3.records).all(|(a, b)| a.l_j == b.l_j));

    let report = evaluate(&s3.models, &crate::experiment::crack_data(&cfg).unwrap().test, &cfg).unwrap();
    assert!(report.iou_max >= report.aiu && report.hd95_min <= report.ahd95);
}

#[test]
fn resume_reproduces_the_loss_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.checkpoint_every = 3;
    cfg.network.blur_skip = true;
    cfg.weights.use_fo_weight = true;
    let req = StageRequest { init_models: Some(Models::new(&cfg)), ..StageRequest::new(Stage::Joint) };
    let full = run_stage(&cfg, &req, cracks(4)).unwrap();
    let mid = full.dir.join("ckpt_3");
    assert!(mid.join("adam_sr.safetensors").exists() && mid.join("adam_seg.safetensors").exists());

    let resumed =
        run_stage(&cfg, &StageRequest { resume: Some(mid.clone()), ..StageRequest::new(Stage::Joint) }, cracks(4))
            .unwrap();
    assert_eq!(resumed.records.len(), 3);
    for (a, b) in full.records[3..].iter().zip(&resumed.records) {
        assert_eq!((a.step, a.l_j, a.l_s, a.l_c, a.beta), (b.step, b.l_j, b.l_s, b.l_c, b.beta));
    }
    assert_eq!(full.models.sr.params.tensors(), resumed.models.sr.params.tensors());
    assert_eq!(full.models.seg.params.tensors(), resumed.models.seg.params.tensors());
    let log = std::fs::read_to_string(full.dir.join("train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);

    // A different config cannot resume the checkpoint.
    let mut other = cfg.clone();
    other.loss.alpha = 0.25;
    let err = run_stage(&other, &StageRequest { resume: Some(mid), ..StageRequest::new(Stage::Joint) }, cracks(4));
    assert!(matches!(err, Err(Error::State(_))));
}

#[test]
fn disabled_options_reduce_to_plain_joint_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut explicit = cfg.clone();
    explicit.weights.m_c = 4.0;
    explicit.weights.m_f = 2.0;
    explicit.network.kernel_embed = 16;
    let run = |c: &RunConfig| {
        let plan = StagePlan::new(Stage::Joint, c, false).unwrap();
        let mut t = Trainer::new(c, plan, Models::new(c), cracks(4)).unwrap();
        (0..3).map(|_| t.step().unwrap().l_j).collect::<Vec<_>>()
    };
    assert_eq!(run(&cfg), run(&explicit));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.weights.use_co_weight = true;
    cfg.weights.m_c = 0.0;
    let mut models = Models::new(&cfg);
    let t = models.sr.params.get_mut(0);
    t.data_mut()[0] = f32::NAN;
    let req = StageRequest { init_models: Some(models), ..StageRequest::new(Stage::Joint) };
    let err = run_stage(&cfg, &req, cracks(4)).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    let dump = dir.path().join("step3/failure");
    assert!(dump.join("failure.json").exists() && dump.join("hr_0.png").exists());
}
