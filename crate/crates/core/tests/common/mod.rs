#![allow(dead_code)]

use std::path::Path;

use crackres::config::RunConfig;

/// Small networks and short schedules so full pipelines run in seconds.
pub const TINY: &str = r#"{
  "network": { "sr_features": 8, "sr_blocks": 1, "kernel_hidden": 8, "seg_widths": [4, 8, 8], "kernel_embed": 8 },
  "train": { "batch_size": 2, "step1_iterations": 6, "step2_iterations": 4, "step3_iterations": 8 },
  "data": { "synthetic": { "train_count": 8, "test_count": 4, "pretrain_count": 4 } }
}"#;

pub fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_json(TINY).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}
