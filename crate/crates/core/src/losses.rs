//! Segmentation and super-resolution losses with analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! each prediction entry, treating entries as independent (no simplex
//! projection), so the gradients can be fed straight into a network's
//! backward pass and probed with finite differences.
//!
//! Optional pixel weights multiply each pixel's contribution; they are
//! constants and are never differentiated.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, param, Result};
use crate::imaging::{BinaryMask, BlurKernel, ClassProbs, Grid, Image, LevelSetMap, ProbabilityMap, KERNEL_LEN};

/// Probability clamp used inside the logarithm of the cross entropy.
pub const WCE_EPS: f64 = 1e-7;
/// Guard added to class pixel counts in Generalized Dice weights.
pub const GDICE_EPS: f64 = 1e-7;

/// Segmentation loss preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub enum SegLossKind {
    /// Boundary + Dice + weighted cross entropy.
    #[serde(rename = "bc")]
    Bc,
    /// Boundary + Generalized Dice + weighted cross entropy.
    #[serde(rename = "gbc")]
    Gbc,
    #[serde(rename = "wce")]
    Wce,
    #[serde(rename = "dice")]
    Dice,
    /// Dice + weighted cross entropy.
    #[serde(rename = "combo")]
    Combo,
    #[serde(rename = "boundary+gdice")]
    BoundaryGdice,
}

impl SegLossKind {
    pub const ALL: [SegLossKind; 6] = [
        SegLossKind::Bc,
        SegLossKind::Gbc,
        SegLossKind::Wce,
        SegLossKind::Dice,
        SegLossKind::Combo,
        SegLossKind::BoundaryGdice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SegLossKind::Bc => "bc",
            SegLossKind::Gbc => "gbc",
            SegLossKind::Wce => "wce",
            SegLossKind::Dice => "dice",
            SegLossKind::Combo => "combo",
            SegLossKind::BoundaryGdice => "boundary+gdice",
        }
    }

    /// Coefficients `(boundary, dice, gdice, wce)` of the linear combination.
    pub fn coefficients(self, alpha: f64, gamma: f64) -> [f64; 4] {
        match self {
            SegLossKind::Bc => [alpha, (1.0 - alpha) * (1.0 - gamma), 0.0, (1.0 - alpha) * gamma],
            SegLossKind::Gbc => [alpha, 0.0, (1.0 - alpha) * (1.0 - gamma), (1.0 - alpha) * gamma],
            SegLossKind::Wce => [0.0, 0.0, 0.0, 1.0],
            SegLossKind::Dice => [0.0, 1.0, 0.0, 0.0],
            SegLossKind::Combo => [0.0, 1.0 - gamma, 0.0, gamma],
            SegLossKind::BoundaryGdice => [alpha, 0.0, 1.0 - alpha, 0.0],
        }
    }
}

/// Task weight over training iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaSchedule {
    Fixed(f64),
    /// Grows linearly from 0 to 1 with the iteration count.
    Increasing,
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BetaSchedule::Fixed(b) if !(0.0..=1.0).contains(&b) => param(format!("beta {b} outside [0, 1]")),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            BetaSchedule::Fixed(b) => format!("{b}"),
            BetaSchedule::Increasing => "increasing".into(),
        }
    }
}

impl std::str::FromStr for BetaSchedule {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "increasing" {
            return Ok(BetaSchedule::Increasing);
        }
        let v = s.strip_prefix("fixed:").unwrap_or(s);
        let b: f64 = v.parse().map_err(|_| crate::Error::Config(format!("bad beta schedule {s:?}")))?;
        let sched = BetaSchedule::Fixed(b);
        sched.validate()?;
        Ok(sched)
    }
}

impl Serialize for BetaSchedule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BetaSchedule::Fixed(b) => s.serialize_str(&format!("fixed:{b}")),
            BetaSchedule::Increasing => s.serialize_str("increasing"),
        }
    }
}

impl<'de> Deserialize<'de> for BetaSchedule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(b) => {
                let s = BetaSchedule::Fixed(b);
                s.validate().map_err(serde::de::Error::custom)?;
                Ok(s)
            }
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

impl JsonSchema for BetaSchedule {
    fn schema_name() -> std::borrow::Cow<'static, str> {
        "BetaSchedule".into()
    }

    fn json_schema(_: &mut schemars::SchemaGenerator) -> schemars::Schema {
        schemars::json_schema!({
            "oneOf": [
                { "type": "number", "minimum": 0.0, "maximum": 1.0 },
                { "type": "string", "pattern": "^(increasing|fixed:[0-9.eE+-]+)$" }
            ]
        })
    }
}

fn default_alpha() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.5
}
fn default_beta() -> BetaSchedule {
    BetaSchedule::Fixed(0.5)
}
fn default_kind() -> SegLossKind {
    SegLossKind::Bc
}
fn default_gdice_eps() -> f64 {
    GDICE_EPS
}
fn default_kernel_weight() -> f64 {
    1.0
}

/// Loss hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_kind")]
    pub loss: SegLossKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// A number, `"fixed:<value>"`, or `"increasing"`.
    #[serde(default = "default_beta", alias = "beta_schedule")]
    pub beta: BetaSchedule,
    /// Per-class cross-entropy weights `[background, crack]`; balanced from
    /// the training masks when absent.
    #[serde(default)]
    pub wce_class_weights: Option<[f64; 2]>,
    #[serde(default = "default_gdice_eps")]
    pub gdice_eps: f64,
    #[serde(default = "default_kernel_weight")]
    pub kernel_loss_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            loss: default_kind(),
            alpha: default_alpha(),
            gamma: default_gamma(),
            beta: default_beta(),
            wce_class_weights: None,
            gdice_eps: GDICE_EPS,
            kernel_loss_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return param(format!("{name} = {v} outside [0, 1]"));
            }
        }
        self.beta.validate()?;
        if let Some(w) = self.wce_class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return param("wce class weights must be positive");
            }
        }
        if self.gdice_eps.is_nan() || self.gdice_eps <= 0.0 {
            return param("gdice_eps must be positive");
        }
        if !(self.kernel_loss_weight >= 0.0 && self.kernel_loss_weight.is_finite()) {
            return param("kernel_loss_weight must be non-negative");
        }
        Ok(())
    }

    pub fn class_weights(&self) -> [f64; 2] {
        self.wce_class_weights.unwrap_or([1.0, 1.0])
    }
}

/// Inverse-frequency class weights over a training set, scaled so that a
/// perfectly balanced set gets `[1, 1]`. Absent classes get weight 1.
pub fn balanced_class_weights<'a>(masks: impl IntoIterator<Item = &'a BinaryMask>) -> [f64; 2] {
    let (mut fg, mut total) = (0usize, 0usize);
    for m in masks {
        fg += m.count();
        total += m.data().len();
    }
    let bg = total - fg;
    let w = |n: usize| if n == 0 { 1.0 } else { total as f64 / (2.0 * n as f64) };
    [w(bg), w(fg)]
}

/// Loss value and gradient with respect to the prediction buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn weight_slice(weights: Option<&Grid>, dims: (usize, usize)) -> Result<Option<&[f64]>> {
    match weights {
        Some(w) => {
            ensure_same_shape("pixel weights", w.dims(), dims)?;
            Ok(Some(w.data()))
        }
        None => Ok(None),
    }
}

#[inline]
fn wt(w: Option<&[f64]>, i: usize) -> f64 {
    w.map_or(1.0, |w| w[i])
}

fn boundary_raw(s: &[f64], phi: &[f64], w: Option<&[f64]>) -> LossGrad {
    let n = s.len() as f64;
    let grad: Vec<f64> = phi.iter().enumerate().map(|(i, &p)| wt(w, i) * p / n).collect();
    let value = s.iter().zip(&grad).map(|(a, g)| a * g).sum();
    LossGrad { value, grad }
}

/// Mean of `phi * s` over pixels; gradient `phi / N`.
pub fn boundary_loss(pred: &ProbabilityMap, levelset: &LevelSetMap, weights: Option<&Grid>) -> Result<LossGrad> {
    ensure_same_shape("boundary loss", pred.dims(), levelset.dims())?;
    let w = weight_slice(weights, pred.dims())?;
    Ok(boundary_raw(pred.data(), levelset.data(), w))
}

fn one_hot(gt: &BinaryMask) -> ClassProbs {
    ClassProbs::from_mask(gt)
}

/// `1 - 2 sum(p g) / sum(p^2 + g^2)` over both classes.
pub fn dice_loss(pred: &ClassProbs, gt: &BinaryMask, weights: Option<&Grid>) -> Result<LossGrad> {
    ensure_same_shape("dice loss", pred.dims(), gt.dims())?;
    let w = weight_slice(weights, gt.dims())?;
    let g = one_hot(gt);
    let n = gt.data().len();
    let (p, g) = (pred.data(), g.data());
    let (mut a, mut b) = (0.0, 0.0);
    for k in 0..p.len() {
        let wk = wt(w, k % n);
        a += wk * p[k] * g[k];
        b += wk * (p[k] * p[k] + g[k] * g[k]);
    }
    let grad = (0..p.len()).map(|k| -2.0 * wt(w, k % n) * (g[k] * b - 2.0 * a * p[k]) / (b * b)).collect();
    Ok(LossGrad { value: 1.0 - 2.0 * a / b, grad })
}

/// Generalized Dice with class weights `1 / (count + eps)`.
pub fn gdice_loss(pred: &ClassProbs, gt: &BinaryMask, eps: f64, weights: Option<&Grid>) -> Result<LossGrad> {
    ensure_same_shape("gdice loss", pred.dims(), gt.dims())?;
    let w = weight_slice(weights, gt.dims())?;
    let g = one_hot(gt);
    let n = gt.data().len();
    let (p, g) = (pred.data(), g.data());
    let class_w: Vec<f64> =
        (0..ClassProbs::CLASSES).map(|j| 1.0 / (g[j * n..(j + 1) * n].iter().sum::<f64>() + eps)).collect();
    let (mut a, mut b) = (0.0, 0.0);
    for k in 0..p.len() {
        let c = class_w[k / n] * wt(w, k % n);
        a += c * p[k] * g[k];
        b += c * (p[k] + g[k]);
    }
    let grad = (0..p.len()).map(|k| -2.0 * class_w[k / n] * wt(w, k % n) * (g[k] * b - a) / (b * b)).collect();
    Ok(LossGrad { value: 1.0 - 2.0 * a / b, grad })
}

/// Class-weighted cross entropy, averaged over pixels.
pub fn wce_loss(
    pred: &ClassProbs,
    gt: &BinaryMask,
    class_weights: [f64; 2],
    weights: Option<&Grid>,
) -> Result<LossGrad> {
    ensure_same_shape("wce loss", pred.dims(), gt.dims())?;
    let w = weight_slice(weights, gt.dims())?;
    let g = one_hot(gt);
    let n = gt.data().len();
    let (p, g) = (pred.data(), g.data());
    let mut value = 0.0;
    let mut grad = vec![0.0; p.len()];
    for k in 0..p.len() {
        if g[k] == 0.0 {
            continue;
        }
        let c = class_weights[k / n] * wt(w, k % n) * g[k] / n as f64;
        value -= c * p[k].max(WCE_EPS).ln();
        if p[k] > WCE_EPS {
            grad[k] = -c / p[k];
        }
    }
    Ok(LossGrad { value, grad })
}

/// Individual loss terms of one segmentation-loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegComponents {
    pub boundary: f64,
    pub dice: f64,
    pub gdice: f64,
    pub wce: f64,
}

/// Composite segmentation loss with gradient over the class planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    pub components: SegComponents,
}

/// Boundary Combo loss `a*L_B + (1-a)*((1-g)*L_D + g*L_WCE)`. With
/// `generalized`, the Generalized Dice term replaces Dice.
pub fn bc_loss(
    pred: &ClassProbs,
    gt: &BinaryMask,
    levelset: &LevelSetMap,
    config: &LossConfig,
    generalized: bool,
    weights: Option<&Grid>,
) -> Result<SegLoss> {
    let (alpha, gamma) = (config.alpha, config.gamma);
    let lb = boundary_on_plane(pred, levelset, weights)?;
    let region =
        if generalized { gdice_loss(pred, gt, config.gdice_eps, weights)? } else { dice_loss(pred, gt, weights)? };
    let lw = wce_loss(pred, gt, config.class_weights(), weights)?;

    let value = alpha * lb.value + (1.0 - alpha) * ((1.0 - gamma) * region.value + gamma * lw.value);
    let n = lb.grad.len();
    let grad = (0..pred.data().len())
        .map(|k| {
            let b = if k >= n { lb.grad[k - n] } else { 0.0 };
            alpha * b + (1.0 - alpha) * ((1.0 - gamma) * region.grad[k] + gamma * lw.grad[k])
        })
        .collect();
    let mut components = SegComponents { boundary: lb.value, wce: lw.value, ..Default::default() };
    if generalized {
        components.gdice = region.value;
    } else {
        components.dice = region.value;
    }
    Ok(SegLoss { value, grad, components })
}

/// Boundary loss over the raw crack plane of a class map.
fn boundary_on_plane(pred: &ClassProbs, levelset: &LevelSetMap, weights: Option<&Grid>) -> Result<LossGrad> {
    ensure_same_shape("boundary loss", pred.dims(), levelset.dims())?;
    let w = weight_slice(weights, pred.dims())?;
    Ok(boundary_raw(pred.plane(1), levelset.data(), w))
}

/// Segmentation loss for any preset in `config.loss`.
pub fn seg_loss(
    pred: &ClassProbs,
    gt: &BinaryMask,
    levelset: &LevelSetMap,
    config: &LossConfig,
    weights: Option<&Grid>,
) -> Result<SegLoss> {
    match config.loss {
        SegLossKind::Bc => bc_loss(pred, gt, levelset, config, false, weights),
        SegLossKind::Gbc => bc_loss(pred, gt, levelset, config, true, weights),
        kind => {
            let [cb, cd, cg, cw] = kind.coefficients(config.alpha, config.gamma);
            let total = pred.data().len();
            let n = total / 2;
            let mut grad = vec![0.0; total];
            let mut comps = SegComponents::default();
            let mut value = 0.0;
            if cb != 0.0 {
                let lb = boundary_on_plane(pred, levelset, weights)?;
                comps.boundary = lb.value;
                value += cb * lb.value;
                for (g, d) in grad[n..].iter_mut().zip(&lb.grad) {
                    *g += cb * d;
                }
            }
            let mut add = |coef: f64, l: LossGrad| -> f64 {
                if coef != 0.0 {
                    value += coef * l.value;
                    for (g, d) in grad.iter_mut().zip(&l.grad) {
                        *g += coef * d;
                    }
                }
                l.value
            };
            if cd != 0.0 {
                comps.dice = add(cd, dice_loss(pred, gt, weights)?);
            }
            if cg != 0.0 {
                comps.gdice = add(cg, gdice_loss(pred, gt, config.gdice_eps, weights)?);
            }
            if cw != 0.0 {
                comps.wce = add(cw, wce_loss(pred, gt, config.class_weights(), weights)?);
            }
            Ok(SegLoss { value, grad, components: comps })
        }
    }
}

/// SR loss value, gradients and the per-pixel image error.
#[derive(Clone, Debug, PartialEq)]
pub struct SrLoss {
    pub value: f64,
    pub image_term: f64,
    pub kernel_term: f64,
    /// Gradient with respect to the SR image (planar, like `Image::data`).
    pub grad_image: Vec<f64>,
    /// Gradient with respect to the predicted kernel entries.
    pub grad_kernel: Vec<f64>,
    /// Channel-averaged absolute error per pixel (unweighted).
    pub pixel_loss: Grid,
}

/// Mean absolute image error plus `kernel_weight` times mean absolute
/// kernel error. `weights` scales each pixel of the image term.
pub fn sr_loss(
    sr: &Image,
    hr: &Image,
    pred_kernel: &BlurKernel,
    gt_kernel: &BlurKernel,
    kernel_weight: f64,
    weights: Option<&Grid>,
) -> Result<SrLoss> {
    sr_loss_raw(sr.data(), hr, pred_kernel.values(), gt_kernel, kernel_weight, weights, sr.dims(), sr.channels())
}

/// As [`sr_loss`], over raw buffers (used by finite-difference probes).
#[allow(clippy::too_many_arguments)]
pub fn sr_loss_raw(
    sr: &[f64],
    hr: &Image,
    pred_kernel: &[f64],
    gt_kernel: &BlurKernel,
    kernel_weight: f64,
    weights: Option<&Grid>,
    dims: (usize, usize),
    channels: usize,
) -> Result<SrLoss> {
    ensure_same_shape("sr loss", dims, hr.dims())?;
    if channels != hr.channels() || sr.len() != hr.data().len() {
        return param("sr loss: channel mismatch");
    }
    if pred_kernel.len() != KERNEL_LEN {
        return param("sr loss: kernel size mismatch");
    }
    let w = weight_slice(weights, dims)?;
    let n = dims.0 * dims.1;
    let mut pixel = vec![0.0; n];
    let mut grad_image = vec![0.0; sr.len()];
    let scale = 1.0 / (channels * n) as f64;
    for (k, (&a, &b)) in sr.iter().zip(hr.data()).enumerate() {
        let d = a - b;
        pixel[k % n] += d.abs() / channels as f64;
        grad_image[k] = wt(w, k % n) * d.signum() * if d == 0.0 { 0.0 } else { scale };
    }
    let image_term = pixel.iter().enumerate().map(|(i, e)| wt(w, i) * e).sum::<f64>() / n as f64;
    let kn = KERNEL_LEN as f64;
    let mut kernel_abs = 0.0;
    let grad_kernel = pred_kernel
        .iter()
        .zip(gt_kernel.values())
        .map(|(&p, &g)| {
            let d = p - g;
            kernel_abs += d.abs();
            if d == 0.0 {
                0.0
            } else {
                kernel_weight * d.signum() / kn
            }
        })
        .collect();
    let kernel_term = kernel_abs / kn;
    Ok(SrLoss {
        value: image_term + kernel_weight * kernel_term,
        image_term,
        kernel_term,
        grad_image,
        grad_kernel,
        pixel_loss: Grid::new(dims.0, dims.1, pixel)?,
    })
}

/// `(1 - beta) * l_s + beta * l_c`.
pub fn joint_loss(l_s: f64, l_c: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&beta) {
        return param(format!("beta {beta} outside [0, 1]"));
    }
    Ok((1.0 - beta) * l_s + beta * l_c)
}
