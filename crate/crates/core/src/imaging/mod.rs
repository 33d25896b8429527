//! Deterministic grid primitives shared by the rest of the crate.
//!
//! Images are stored planar (channel-major, then row-major) as `f64` in
//! `[0, 1]`. Masks, probability maps and level sets share the `Grid`
//! layout so they can be combined pixelwise without reshaping.

mod convolve;
mod distance;
mod kernel;
pub mod png_io;
mod resize;

pub use convolve::{convolve, reflect_index};
pub use distance::{distance_transform, level_set};
pub use kernel::gaussian_kernel;
pub use resize::{bicubic_resize, Scale};

use crate::error::{param, Result};

/// Side length of every blur kernel.
pub const KERNEL_SIZE: usize = 21;
/// Number of entries in a flattened kernel.
pub const KERNEL_LEN: usize = KERNEL_SIZE * KERNEL_SIZE;

/// Planar `channels x height x width` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image, rejecting non-finite values and clamping the rest to `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return param(format!("image must have 1 or 3 channels, got {channels}"));
        }
        if height == 0 || width == 0 {
            return param("image must be non-empty");
        }
        if data.len() != height * width * channels {
            return param(format!("image buffer has {} values, expected {}", data.len(), height * width * channels));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return param("image contains non-finite values");
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Writes a value, clamped to `[0, 1]`.
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = (c * self.height + y) * self.width + x;
        self.data[i] = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Channel-averaged luminance as a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.height * self.width;
        let data = (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f64>() / self.channels as f64)
            .collect();
        Image { height: self.height, width: self.width, channels: 1, data }
    }
}

/// Real-valued `height x width` grid (distance maps, weight maps, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return param(format!("grid buffer has {} values, expected {}", data.len(), height * width));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Ground-truth or binarized crack mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return param(format!("mask buffer has {} values, expected {}", data.len(), height * width));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    /// Binarizes `values >= threshold`.
    pub fn threshold(grid: &Grid, threshold: f64) -> Self {
        Self { height: grid.height, width: grid.width, data: grid.data.iter().map(|&v| v >= threshold).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&v| v)
    }

    pub fn inverted(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| !v).collect() }
    }

    /// Mask as a 0/1 grid.
    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Coordinates `(y, x)` of every foreground pixel, row-major.
    pub fn points(&self) -> Vec<(usize, usize)> {
        self.data.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| (i / self.width, i % self.width)).collect()
    }
}

/// Per-pixel crack probability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap(Grid);

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return param("probabilities must lie in [0, 1]");
        }
        Ok(Self(Grid::new(height, width, data)?))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// Two-class softmax output, planar: background plane then crack plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbs {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ClassProbs {
    pub const CLASSES: usize = 2;

    /// Builds from raw planes. Values are only required to be finite so that
    /// finite-difference probes may step off the simplex.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CLASSES * height * width {
            return param(format!("class map has {} values, expected {}", data.len(), Self::CLASSES * height * width));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return param("class probabilities must be finite");
        }
        Ok(Self { height, width, data })
    }

    /// `[1 - p, p]` from a crack probability map.
    pub fn from_crack(p: &ProbabilityMap) -> Self {
        let (height, width) = p.dims();
        let mut data: Vec<f64> = p.data().iter().map(|v| 1.0 - v).collect();
        data.extend_from_slice(p.data());
        Self { height, width, data }
    }

    /// One-hot planes of a mask.
    pub fn from_mask(mask: &BinaryMask) -> Self {
        let bg = mask.data().iter().map(|&g| if g { 0.0 } else { 1.0 });
        let fg = mask.data().iter().map(|&g| if g { 1.0 } else { 0.0 });
        Self { height: mask.height(), width: mask.width(), data: bg.chain(fg).collect() }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, class: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[class * n..(class + 1) * n]
    }

    /// Crack-class plane clamped into a probability map.
    pub fn crack(&self) -> ProbabilityMap {
        let data = self.plane(1).iter().map(|v| v.clamp(0.0, 1.0)).collect();
        ProbabilityMap(Grid { height: self.height, width: self.width, data })
    }
}

/// Signed distance field: `<= 0` inside the region, `>= 0` outside.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetMap(Grid);

impl LevelSetMap {
    pub(crate) fn from_grid(grid: Grid) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }
}

/// `KERNEL_SIZE x KERNEL_SIZE` non-negative kernel summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    data: Vec<f64>,
}

impl BlurKernel {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    /// Validates an already-normalized kernel.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.len() != KERNEL_LEN {
            return param(format!("kernel must have {KERNEL_LEN} entries, got {}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return param("kernel entries must be finite and non-negative");
        }
        let sum: f64 = data.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return param(format!("kernel sums to {sum}, expected 1"));
        }
        Ok(Self { data })
    }

    /// Normalizes non-negative weights to sum to one.
    pub fn from_weights(mut data: Vec<f64>) -> Result<Self> {
        if data.len() != KERNEL_LEN {
            return param(format!("kernel must have {KERNEL_LEN} entries, got {}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return param("kernel weights must be finite and non-negative");
        }
        let sum: f64 = data.iter().sum();
        if sum <= 0.0 {
            return param("kernel weights sum to zero");
        }
        for v in &mut data {
            *v /= sum;
        }
        Ok(Self { data })
    }

    /// Centered delta.
    pub fn delta() -> Self {
        let mut data = vec![0.0; KERNEL_LEN];
        data[KERNEL_LEN / 2] = 1.0;
        Self { data }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * KERNEL_SIZE + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }
}
