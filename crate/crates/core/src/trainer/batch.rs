use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Stage, TrainData};
use crate::config::RunConfig;
use crate::degradation::{degrade, derive_seed, sample_spec_in, AugmentParams, DegradationSpec};
use crate::error::Result;
use crate::imaging::{png_io, BinaryMask, BlurKernel, Image, Scale};

/// One augmented, degraded training example.
#[derive(Clone, Debug)]
pub struct BatchItem {
    /// Index into the training set.
    pub index: usize,
    pub seed: u64,
    /// RGB HR crop.
    pub hr: Image,
    pub mask: Option<BinaryMask>,
    pub lr: Image,
    pub kernel: BlurKernel,
    pub spec: DegradationSpec,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

fn to_rgb(img: Image) -> Image {
    if img.channels() == 3 {
        return img;
    }
    let (h, w) = img.dims();
    Image::new(h, w, 3, img.plane(0).repeat(3)).expect("replicated planes")
}

impl Batch {
    /// The batch of `iteration`, a pure function of the run seed, the
    /// stage and the iteration.
    pub fn build(cfg: &RunConfig, stage: Stage, iteration: usize, data: &TrainData) -> Result<Self> {
        let stage_seed = derive_seed(cfg.train.seed, 0xba7c_0000 + stage.number() as u64);
        let iter_seed = derive_seed(stage_seed, iteration as u64);
        let items = (0..cfg.train.batch_size)
            .map(|b| {
                let seed = derive_seed(iter_seed, b as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let index = rng.gen_range(0..data.len());
                let (image, mask) = match data {
                    TrainData::Generic(v) => (&v[index], None),
                    TrainData::Cracks(v) => (&v[index].image, Some(&v[index].mask)),
                };
                let aug = AugmentParams::sample(image.height(), image.width(), cfg.train.patch, derive_seed(seed, 1))?;
                let hr = to_rgb(aug.apply_image(image));
                let mask = mask.map(|m| aug.apply_mask(m));
                let spec = sample_spec_in(derive_seed(seed, 2), cfg.degradation.range(), Scale::QUARTER);
                let (lr, kernel) = degrade(&hr, &spec)?;
                Ok(BatchItem { index, seed, hr, mask, lr, kernel, spec })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }

    pub fn lrs(&self) -> Vec<Image> {
        self.items.iter().map(|i| i.lr.clone()).collect()
    }
}

#[derive(Serialize)]
struct DumpItem<'a> {
    index: usize,
    seed: u64,
    spec: &'a DegradationSpec,
}

/// Diagnostic record of a step that produced non-finite values.
#[derive(Clone, Debug)]
pub struct FailureReport {
    pub stage: Stage,
    pub iteration: usize,
    pub beta: f64,
    pub reason: String,
    pub batch: Batch,
}

impl FailureReport {
    pub(crate) fn new(stage: Stage, iteration: usize, beta: f64, reason: &str, batch: Batch) -> Self {
        Self { stage, iteration, beta, reason: reason.to_string(), batch }
    }

    /// Writes `failure.json` and the batch images into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let items: Vec<DumpItem> =
            self.batch.items.iter().map(|i| DumpItem { index: i.index, seed: i.seed, spec: &i.spec }).collect();
        let json = serde_json::json!({
            "stage": self.stage.number(),
            "iteration": self.iteration,
            "beta": self.beta,
            "reason": self.reason,
            "items": items,
        });
        std::fs::write(dir.join("failure.json"), serde_json::to_string_pretty(&json)?)?;
        for (b, item) in self.batch.items.iter().enumerate() {
            png_io::write_image(&dir.join(format!("hr_{b}.png")), &item.hr, png_io::Depth::Sixteen, &[])?;
            png_io::write_image(&dir.join(format!("lr_{b}.png")), &item.lr, png_io::Depth::Sixteen, &[])?;
            if let Some(m) = &item.mask {
                png_io::write_mask(&dir.join(format!("mask_{b}.png")), m, &[])?;
            }
        }
        Ok(())
    }
}
