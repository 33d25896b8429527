use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::layers::{Conv, Linear, SLOPE};
use super::params::ParamSet;
use super::tensor::Real;
use super::{images_to_tensor, NetworkConfig};
use crate::error::{param, Result};
use crate::imaging::{BlurKernel, ClassProbs, Image, KERNEL_LEN};

/// Kernel-conditioned feature modulation.
///
/// The kernel is embedded, tiled over the feature map and concatenated
/// with it; two 1x1 branches then give a scale and a shift. The last layer
/// of each branch starts at zero weight with bias 1 (scale) or 0 (shift),
/// so the module starts as the identity.
#[derive(Clone, Copy, Debug)]
pub struct BlurSkip {
    embed: Linear,
    scale1: Conv,
    scale2: Conv,
    shift1: Conv,
    shift2: Conv,
}

impl BlurSkip {
    fn new(p: &mut ParamSet, rng: &mut ChaCha8Rng, channels: usize, embed: usize) -> Self {
        let hidden = channels;
        let cat = channels + embed;
        Self {
            embed: Linear::new(p, rng, "blur_skip.embed", KERNEL_LEN, embed, 1.0),
            scale1: Conv::new(p, rng, "blur_skip.scale1", cat, hidden, 1, 1.0),
            scale2: Conv::constant(p, "blur_skip.scale2", hidden, channels, 1.0),
            shift1: Conv::new(p, rng, "blur_skip.shift1", cat, hidden, 1, 1.0),
            shift2: Conv::constant(p, "blur_skip.shift2", hidden, channels, 0.0),
        }
    }

    /// `features * scale + shift` for `features [N, C, H, W]` and `kernel [N, 441, 1, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], features: Var, kernel: Var) -> Var {
        let [_, _, h, w] = g.value(features).shape();
        let e = self.embed.forward(g, p, kernel);
        let e = g.leaky_relu(e, SLOPE);
        let e = g.tile(e, h, w);
        let cat = g.concat(&[features, e]);
        let s = self.scale1.act(g, p, cat);
        let scale = self.scale2.forward(g, p, s);
        let t = self.shift1.act(g, p, cat);
        let shift = self.shift2.forward(g, p, t);
        let m = g.mul(features, scale);
        g.add(m, shift)
    }
}

/// Three-level encoder-decoder with skip connections and a two-class
/// softmax head. Input sides must be multiples of 4.
#[derive(Clone, Debug)]
pub struct SegNet {
    pub params: ParamSet,
    enc: [[Conv; 2]; 3],
    dec: [[Conv; 2]; 2],
    pub(crate) blur_skip: Option<BlurSkip>,
    classifier: Conv,
}

impl SegNet {
    pub fn new(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let [c1, c2, c3] = cfg.seg_widths;
        let mut pair = |p: &mut ParamSet, name: &str, ci: usize, co: usize| {
            [
                Conv::new(p, &mut rng, &format!("{name}.conv1"), ci, co, 3, 1.0),
                Conv::new(p, &mut rng, &format!("{name}.conv2"), co, co, 3, 1.0),
            ]
        };
        let enc = [pair(&mut p, "enc1", 3, c1), pair(&mut p, "enc2", c1, c2), pair(&mut p, "enc3", c2, c3)];
        let dec = [pair(&mut p, "dec2", c3 + c2, c2), pair(&mut p, "dec1", c2 + c1, c1)];
        let classifier = Conv::new(&mut p, &mut rng, "classifier", c1, 2, 1, 1.0);
        let blur_skip = cfg.blur_skip.then(|| BlurSkip::new(&mut p, &mut rng, c1, cfg.kernel_embed));
        Self { params: p, enc, dec, blur_skip, classifier }
    }

    pub fn has_blur_skip(&self) -> bool {
        self.blur_skip.is_some()
    }

    /// Penultimate features `[N, c1, H, W]`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let block = |g: &mut Graph<T>, convs: &[Conv; 2], x: Var| {
            let y = convs[0].act(g, p, x);
            convs[1].act(g, p, y)
        };
        let e1 = block(g, &self.enc[0], x);
        let d = g.avg_pool2(e1);
        let e2 = block(g, &self.enc[1], d);
        let d = g.avg_pool2(e2);
        let e3 = block(g, &self.enc[2], d);
        let u = g.upsample2(e3);
        let u = g.concat(&[u, e2]);
        let d2 = block(g, &self.dec[0], u);
        let u = g.upsample2(d2);
        let u = g.concat(&[u, e1]);
        block(g, &self.dec[1], u)
    }

    /// Class probabilities `[N, 2, H, W]` (background, crack). The kernel
    /// is used only when the network was built with blur skip.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var, kernel: Option<Var>) -> Var {
        let mut f = self.features(g, p, x);
        if let (Some(bs), Some(k)) = (&self.blur_skip, kernel) {
            f = bs.forward(g, p, f, k);
        }
        let logits = self.classifier.forward(g, p, f);
        g.softmax(logits)
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h < 4 || w < 4 || !h.is_multiple_of(4) || !w.is_multiple_of(4) {
            return param(format!("segmentation input {h}x{w} must have sides that are multiples of 4"));
        }
        Ok(())
    }

    /// Inference on one image.
    pub fn infer(&self, image: &Image, kernel: Option<&BlurKernel>) -> Result<ClassProbs> {
        let (h, w) = image.dims();
        Self::check_input(h, w)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images_to_tensor(std::slice::from_ref(image))?);
        let k = match kernel {
            Some(k) => Some(g.constant(super::Tensor::from_vec(
                [1, KERNEL_LEN, 1, 1],
                k.values().iter().map(|&v| v as f32).collect(),
            )?)),
            None => None,
        };
        let out = self.forward(&mut g, &p, x, k);
        ClassProbs::new(h, w, g.value(out).item(0).iter().map(|&v| v as f64).collect())
    }
}
