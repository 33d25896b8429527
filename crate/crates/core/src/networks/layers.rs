use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{kaiming_uniform, ParamSet};
use super::tensor::{Real, Tensor};

pub(crate) const SLOPE: f64 = 0.2;

/// Convolution layer referencing two entries of a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// Kaiming-uniform weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, ci: usize, co: usize, k: usize, gain: f64) -> Self {
        let w = p.add(format!("{name}.weight"), kaiming_uniform(rng, [co, ci, k, k], ci * k * k, gain));
        let b = p.add(format!("{name}.bias"), Tensor::zeros([co, 1, 1, 1]));
        Self { w, b, stride: 1, pad: k / 2 }
    }

    /// Zero weights and a constant bias.
    pub fn constant(p: &mut ParamSet, name: &str, ci: usize, co: usize, bias: f32) -> Self {
        let w = p.add(format!("{name}.weight"), Tensor::zeros([co, ci, 1, 1]));
        let b = p.add(format!("{name}.bias"), Tensor::full([co, 1, 1, 1], bias));
        Self { w, b, stride: 1, pad: 0 }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }

    pub fn act<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let y = self.forward(g, p, x);
        g.leaky_relu(y, SLOPE)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fi: usize, fo: usize, gain: f64) -> Self {
        let w = p.add(format!("{name}.weight"), kaiming_uniform(rng, [fo, fi, 1, 1], fi, gain));
        let b = p.add(format!("{name}.bias"), Tensor::zeros([fo, 1, 1, 1]));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.linear(x, p[self.w], Some(p[self.b]))
    }
}
