//! Synthetic LR generation: sample an anisotropic Gaussian blur, blur the
//! HR image, then bicubically downsample. Also the crop/flip augmentation
//! applied to HR image and mask pairs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::imaging::{bicubic_resize, convolve, gaussian_kernel, BinaryMask, BlurKernel, Image, Scale, KERNEL_LEN};

/// Parameters of one degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub theta: f64,
    pub scale: Scale,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if ![Scale::HALF, Scale::QUARTER, Scale::EIGHTH].contains(&self.scale) {
            return param(format!("degradation scale must be 1/2, 1/4 or 1/8, got {}", self.scale));
        }
        gaussian_kernel(self.sigma_a, self.sigma_b, self.theta).map(|_| ())
    }

    pub fn kernel(&self) -> Result<BlurKernel> {
        gaussian_kernel(self.sigma_a, self.sigma_b, self.theta)
    }
}

/// Sampling ranges for the blur, uniform in variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceRange {
    pub min: f64,
    pub max: f64,
}

impl Default for VarianceRange {
    fn default() -> Self {
        Self { min: 0.2, max: 4.0 }
    }
}

/// Mixes a global seed with an item index so batches are order-independent.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(global ^ splitmix(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Uniformly samples both variances over `[0.2, 4.0]` and the angle over `[0, pi)`.
pub fn sample_spec(seed: u64) -> DegradationSpec {
    sample_spec_in(seed, VarianceRange::default(), Scale::QUARTER)
}

pub fn sample_spec_in(seed: u64, range: VarianceRange, scale: Scale) -> DegradationSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let va = rng.gen_range(range.min..=range.max);
    let vb = rng.gen_range(range.min..=range.max);
    let theta = rng.gen_range(0.0..PI);
    DegradationSpec { sigma_a: va.sqrt(), sigma_b: vb.sqrt(), theta, scale, seed }
}

/// `lr = downsample(hr * K)`; the kernel is returned for supervision.
pub fn degrade(hr: &Image, spec: &DegradationSpec) -> Result<(Image, BlurKernel)> {
    spec.validate()?;
    let (h, w) = hr.dims();
    if spec.scale.apply(h).is_err() || spec.scale.apply(w).is_err() {
        return param(format!("{h}x{w} image is not divisible by {}", spec.scale.inverse()));
    }
    let kernel = spec.kernel()?;
    let lr = bicubic_resize(&convolve(hr, &kernel), spec.scale)?;
    Ok((lr, kernel))
}

/// JSON sidecar written next to each degraded image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub theta: f64,
    pub scale: Scale,
    pub seed: u64,
    /// Row-major kernel values.
    pub kernel: Vec<f64>,
}

impl Sidecar {
    pub fn new(spec: &DegradationSpec, kernel: &BlurKernel) -> Self {
        Self {
            sigma_a: spec.sigma_a,
            sigma_b: spec.sigma_b,
            theta: spec.theta,
            scale: spec.scale,
            seed: spec.seed,
            kernel: kernel.values().to_vec(),
        }
    }

    pub fn kernel(&self) -> Result<BlurKernel> {
        if self.kernel.len() != KERNEL_LEN {
            return param(format!("sidecar kernel has {} entries", self.kernel.len()));
        }
        BlurKernel::new(self.kernel.clone())
    }

    pub fn spec(&self) -> DegradationSpec {
        DegradationSpec {
            sigma_a: self.sigma_a,
            sigma_b: self.sigma_b,
            theta: self.theta,
            scale: self.scale,
            seed: self.seed,
        }
    }
}

/// Crop window and flips drawn for one augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    pub patch: usize,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl AugmentParams {
    pub fn sample(height: usize, width: usize, patch: usize, seed: u64) -> Result<Self> {
        if patch == 0 || patch > height.min(width) {
            return param(format!("patch {patch} does not fit in {height}x{width}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            top: rng.gen_range(0..=height - patch),
            left: rng.gen_range(0..=width - patch),
            patch,
            flip_horizontal: rng.gen_bool(0.5),
            flip_vertical: rng.gen_bool(0.5),
        })
    }

    /// Source coordinate of output pixel `(y, x)`.
    pub fn source(&self, y: usize, x: usize) -> (usize, usize) {
        let y = if self.flip_vertical { self.patch - 1 - y } else { y };
        let x = if self.flip_horizontal { self.patch - 1 - x } else { x };
        (self.top + y, self.left + x)
    }

    pub fn apply_image(&self, img: &Image) -> Image {
        let p = self.patch;
        let mut data = Vec::with_capacity(p * p * img.channels());
        for c in 0..img.channels() {
            for y in 0..p {
                for x in 0..p {
                    let (sy, sx) = self.source(y, x);
                    data.push(img.get(c, sy, sx));
                }
            }
        }
        Image::new(p, p, img.channels(), data).expect("crop of a valid image")
    }

    pub fn apply_mask(&self, mask: &BinaryMask) -> BinaryMask {
        BinaryMask::from_fn(self.patch, self.patch, |y, x| {
            let (sy, sx) = self.source(y, x);
            mask.get(sy, sx)
        })
    }
}

/// Random crop plus independent horizontal/vertical flips, identical for image and mask.
pub fn augment(hr: &Image, mask: &BinaryMask, patch: usize, seed: u64) -> Result<(Image, BinaryMask)> {
    if hr.dims() != mask.dims() {
        return param("image and mask dimensions differ");
    }
    let params = AugmentParams::sample(hr.height(), hr.width(), patch, seed)?;
    Ok((params.apply_image(hr), params.apply_mask(mask)))
}

pub fn flip_horizontal(img: &Image) -> Image {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        for y in 0..h {
            for x in (0..w).rev() {
                data.push(img.get(c, y, x));
            }
        }
    }
    Image::new(h, w, img.channels(), data).expect("flip of a valid image")
}

pub fn flip_vertical(img: &Image) -> Image {
    let (h, w) = img.dims();
    let mut data = Vec::with_capacity(img.data().len());
    for c in 0..img.channels() {
        for y in (0..h).rev() {
            for x in 0..w {
                data.push(img.get(c, y, x));
            }
        }
    }
    Image::new(h, w, img.channels(), data).expect("flip of a valid image")
}
