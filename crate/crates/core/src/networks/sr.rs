use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::layers::{Conv, Linear, SLOPE};
use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use super::{image_from_tensor, images_to_tensor, NetworkConfig};
use crate::error::{param, Result};
use crate::imaging::{bicubic_resize, BlurKernel, Image, Scale, KERNEL_LEN};

/// Upscaling factor of the SR network.
pub const SR_FACTOR: usize = 4;
/// Smallest accepted LR side.
pub const MIN_LR_SIDE: usize = 16;

/// Residual SR network with a kernel-regression head.
///
/// Body: conv, residual blocks, two conv + pixel-shuffle x2 stages, output
/// conv; the result is added to the bicubic upsampling of the input and
/// clamped. Head: conv, global pooling, two linear layers and a softmax
/// over the 441 kernel taps.
#[derive(Clone, Debug)]
pub struct SrNet {
    pub params: ParamSet,
    head: Conv,
    blocks: Vec<(Conv, Conv)>,
    up1: Conv,
    up2: Conv,
    tail: Conv,
    kconv: Conv,
    k1: Linear,
    k2: Linear,
}

/// Tape handles of an SR forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SrVars {
    /// `[N, 3, 4h, 4w]`
    pub sr: Var,
    /// `[N, 441, 1, 1]`
    pub kernel: Var,
}

impl SrNet {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let f = cfg.sr_features;
        let head = Conv::new(&mut p, &mut rng, "head", 3, f, 3, 1.0);
        let blocks = (0..cfg.sr_blocks)
            .map(|i| {
                (
                    Conv::new(&mut p, &mut rng, &format!("block{i}.conv1"), f, f, 3, 1.0),
                    Conv::new(&mut p, &mut rng, &format!("block{i}.conv2"), f, f, 3, 0.1),
                )
            })
            .collect();
        let up1 = Conv::new(&mut p, &mut rng, "up1", f, 2 * f, 3, 1.0);
        let up2 = Conv::new(&mut p, &mut rng, "up2", f / 2, f, 3, 1.0);
        let tail = Conv::new(&mut p, &mut rng, "tail", f / 4, 3, 3, 0.1);
        let kconv = Conv::new(&mut p, &mut rng, "kernel.conv", f, f, 3, 1.0);
        let k1 = Linear::new(&mut p, &mut rng, "kernel.fc1", f, cfg.kernel_hidden, 1.0);
        let k2 = Linear::new(&mut p, &mut rng, "kernel.fc2", cfg.kernel_hidden, KERNEL_LEN, 0.01);
        Self { params: p, head, blocks, up1, up2, tail, kconv, k1, k2 }
    }

    /// Builds the forward pass. `bicubic` is the x4 bicubic upsampling of
    /// `lr`, supplied as a constant.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], lr: Var, bicubic: Var) -> SrVars {
        let mut x = self.head.act(g, p, lr);
        let shallow = x;
        for (c1, c2) in &self.blocks {
            let h = c1.act(g, p, x);
            let h = c2.forward(g, p, h);
            x = g.add(x, h);
        }
        let feats = g.add(x, shallow);

        let k = self.kconv.act(g, p, feats);
        let k = g.global_avg_pool(k);
        let k = self.k1.forward(g, p, k);
        let k = g.leaky_relu(k, SLOPE);
        let k = self.k2.forward(g, p, k);
        let kernel = g.softmax(k);

        let u = self.up1.act(g, p, feats);
        let u = g.pixel_shuffle(u, 2);
        let u = self.up2.act(g, p, u);
        let u = g.pixel_shuffle(u, 2);
        let r = self.tail.forward(g, p, u);
        let s = g.add(r, bicubic);
        SrVars { sr: g.clamp01(s), kernel }
    }

    /// Checks sizes and returns the LR batch and its bicubic upsampling.
    pub fn prepare_inputs<T: Real>(lrs: &[Image]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut ups = Vec::with_capacity(lrs.len());
        for lr in lrs {
            let (h, w) = lr.dims();
            if h < MIN_LR_SIDE || w < MIN_LR_SIDE {
                return param(format!("LR input {h}x{w} is smaller than {MIN_LR_SIDE}x{MIN_LR_SIDE}"));
            }
            ups.push(bicubic_resize(lr, Scale::new(SR_FACTOR as u32, 1)?)?);
        }
        Ok((images_to_tensor(lrs)?, images_to_tensor(&ups)?))
    }

    /// Inference on one LR image.
    pub fn infer(&self, lr: &Image) -> Result<(Image, BlurKernel)> {
        let (x, up) = Self::prepare_inputs::<f32>(std::slice::from_ref(lr))?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let (xv, uv) = (g.constant(x), g.constant(up));
        let out = self.forward(&mut g, &p, xv, uv);
        let sr = image_from_tensor(g.value(out.sr), 0)?;
        let kernel = kernel_from_tensor(g.value(out.kernel), 0)?;
        Ok((sr, kernel))
    }
}

/// Kernel of batch item `n` from a `[N, 441, 1, 1]` softmax output.
pub fn kernel_from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<BlurKernel> {
    BlurKernel::from_weights(t.item(n).iter().map(|v| v.f64()).collect())
}
