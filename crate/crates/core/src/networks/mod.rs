//! Small trainable networks on a hand-written autograd tape.

pub mod graph;
mod layers;
pub mod params;
pub mod seg;
pub mod sr;
pub mod tensor;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

pub use graph::{Gradients, Graph, Var};
pub use params::{load_tensors, save_tensors, Adam, ParamSet};
pub use seg::{BlurSkip, SegNet};
pub use sr::{kernel_from_tensor, SrNet, SrVars, MIN_LR_SIDE, SR_FACTOR};
pub use tensor::{Real, Tensor};

use crate::error::{param, Result};
use crate::imaging::Image;

fn default_sr_features() -> usize {
    32
}
fn default_sr_blocks() -> usize {
    4
}
fn default_seg_widths() -> [usize; 3] {
    [8, 16, 32]
}
fn default_embed() -> usize {
    32
}

/// Network sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default = "default_sr_features")]
    pub sr_features: usize,
    #[serde(default = "default_sr_blocks")]
    pub sr_blocks: usize,
    #[serde(default = "default_embed")]
    pub kernel_hidden: usize,
    #[serde(default = "default_seg_widths")]
    pub seg_widths: [usize; 3],
    /// Kernel embedding channels of the blur skip.
    #[serde(default = "default_embed")]
    pub kernel_embed: usize,
    #[serde(default)]
    pub blur_skip: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            sr_features: 32,
            sr_blocks: 4,
            kernel_hidden: 32,
            seg_widths: [8, 16, 32],
            kernel_embed: 32,
            blur_skip: false,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sr_features < 4 || !self.sr_features.is_multiple_of(4) {
            return param("sr_features must be a positive multiple of 4");
        }
        if self.kernel_hidden == 0 || self.kernel_embed == 0 || self.seg_widths.contains(&0) {
            return param("network widths must be positive");
        }
        Ok(())
    }
}

/// Stacks RGB images (grey is replicated) into `[N, 3, H, W]`.
pub fn images_to_tensor<T: Real>(images: &[Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return param("empty image batch");
    };
    let (h, w) = first.dims();
    let items: Vec<Vec<f64>> = images
        .iter()
        .map(|im| {
            if im.dims() != (h, w) {
                return param("batch images differ in size");
            }
            Ok(match im.channels() {
                3 => im.data().to_vec(),
                _ => im.data().repeat(3),
            })
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&items, [3, h, w])
}

/// Batch item `n` of a `[N, 3, H, W]` tensor as an image.
pub fn image_from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Image> {
    let [_, c, h, w] = t.shape();
    Image::new(h, w, c, t.item(n).iter().map(|v| v.f64()).collect())
}

#[cfg(test)]
mod tests;
