//! Segmentation and restoration metrics with threshold sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, param, Result};
use crate::imaging::{distance_transform, BinaryMask, BlurKernel, Grid, Image, ProbabilityMap};

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

/// `0.01, 0.02, ..., 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..100).map(|i| i as f64 / 100.0).collect()
}

fn check_thresholds(t: &[f64]) -> Result<()> {
    if t.is_empty() {
        return param("threshold grid is empty");
    }
    if t.iter().any(|&v| !(v > 0.0 && v < 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
        return param("thresholds must be strictly increasing inside (0, 1)");
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same_shape("iou", pred.dims(), gt.dims())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

fn directed_hd95(from: &BinaryMask, to_distance: &Grid) -> f64 {
    let mut d: Vec<f64> = from.data().iter().zip(to_distance.data()).filter_map(|(&m, &v)| m.then_some(v)).collect();
    percentile(&mut d, 95.0)
}

/// 95th-percentile symmetric Hausdorff distance in pixels.
///
/// Both empty gives 0; exactly one empty gives the image diagonal.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    ensure_same_shape("hd95", pred.dims(), gt.dims())?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => Ok(0.0),
        (true, false) | (false, true) => {
            let (h, w) = gt.dims();
            Ok(((h * h + w * w) as f64).sqrt())
        }
        (false, false) => {
            let to_gt = distance_transform(gt)?;
            let to_pred = distance_transform(pred)?;
            Ok(directed_hd95(pred, &to_gt).max(directed_hd95(gt, &to_pred)))
        }
    }
}

/// Mean-over-images metric at each threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweep {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    /// `per_image[i][t]` for image `i` at threshold index `t`.
    pub per_image: Vec<Vec<f64>>,
}

impl ThresholdSweep {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Index of the first maximum.
    pub fn argmax(&self) -> usize {
        self.values.iter().enumerate().fold(0, |best, (i, &v)| if v > self.values[best] { i } else { best })
    }

    /// Index of the first minimum.
    pub fn argmin(&self) -> usize {
        self.values.iter().enumerate().fold(0, |best, (i, &v)| if v < self.values[best] { i } else { best })
    }
}

fn sweep(
    preds: &[ProbabilityMap],
    gts: &[BinaryMask],
    thresholds: &[f64],
    metric: impl Fn(&BinaryMask, &BinaryMask) -> Result<f64>,
) -> Result<ThresholdSweep> {
    if preds.is_empty() || preds.len() != gts.len() {
        return param(format!("sweep needs matching non-empty sets, got {} and {}", preds.len(), gts.len()));
    }
    check_thresholds(thresholds)?;
    let per_image = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| thresholds.iter().map(|&t| metric(&BinaryMask::threshold(p.grid(), t), g)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let n = preds.len() as f64;
    let values = (0..thresholds.len()).map(|t| per_image.iter().map(|r| r[t]).sum::<f64>() / n).collect();
    Ok(ThresholdSweep { thresholds: thresholds.to_vec(), values, per_image })
}

/// Returns `(IoU_max, AIU, sweep)`.
pub fn iou_sweep(
    preds: &[ProbabilityMap],
    gts: &[BinaryMask],
    thresholds: &[f64],
) -> Result<(f64, f64, ThresholdSweep)> {
    let s = sweep(preds, gts, thresholds, iou)?;
    Ok((s.values[s.argmax()], s.mean(), s))
}

/// Returns `(HD95_min, AHD95, sweep)`.
pub fn hd95_sweep(
    preds: &[ProbabilityMap],
    gts: &[BinaryMask],
    thresholds: &[f64],
) -> Result<(f64, f64, ThresholdSweep)> {
    let s = sweep(preds, gts, thresholds, hd95)?;
    Ok((s.values[s.argmin()], s.mean(), s))
}

fn psnr_raw(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

fn same_image_shape(a: &Image, b: &Image) -> Result<()> {
    ensure_same_shape("image metric", a.dims(), b.dims())?;
    if a.channels() != b.channels() {
        return param("image metric: channel mismatch");
    }
    Ok(())
}

/// PSNR in dB for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_image_shape(a, b)?;
    Ok(psnr_raw(a.data(), b.data(), 1.0))
}

/// PSNR of a predicted kernel with the ground-truth maximum as peak.
pub fn kernel_psnr(pred: &BlurKernel, gt: &BlurKernel) -> f64 {
    psnr_raw(pred.values(), gt.values(), gt.max())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|i| g[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| g[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, g: &[f64]) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, h, w, g);
    let mu_b = filter_valid(b, h, w, g);
    let aa = filter_valid(&prod(a, a), h, w, g);
    let bb = filter_valid(&prod(b, b), h, w, g);
    let ab = filter_valid(&prod(a, b), h, w, g);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
        })
        .sum::<f64>()
        / n as f64
}

/// Mean SSIM over the valid region with an 11x11 Gaussian window
/// (sigma 1.5), averaged over channels. Images smaller than the window use
/// the largest odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_image_shape(a, b)?;
    let (h, w) = a.dims();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size);
    let c = a.channels();
    Ok((0..c).map(|ch| ssim_plane(a.plane(ch), b.plane(ch), h, w, &g)).sum::<f64>() / c as f64)
}

/// One image's contribution to a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(rename = "IoU")]
    pub iou: f64,
    #[serde(rename = "HD95")]
    pub hd95: f64,
    #[serde(rename = "PSNR", skip_serializing_if = "Option::is_none", default)]
    pub psnr: Option<f64>,
    #[serde(rename = "SSIM", skip_serializing_if = "Option::is_none", default)]
    pub ssim: Option<f64>,
}

/// Evaluation summary. Per-image IoU/HD95 are at the selected thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "IoU_max")]
    pub iou_max: f64,
    #[serde(rename = "AIU")]
    pub aiu: f64,
    #[serde(rename = "HD95_min")]
    pub hd95_min: f64,
    #[serde(rename = "AHD95")]
    pub ahd95: f64,
    #[serde(rename = "PSNR")]
    pub psnr: Option<f64>,
    #[serde(rename = "SSIM")]
    pub ssim: Option<f64>,
    #[serde(rename = "kernel_PSNR")]
    pub kernel_psnr: Option<f64>,
    pub iou_threshold: f64,
    pub hd95_threshold: f64,
    pub per_image: Vec<ImageMetrics>,
    pub iou_sweep: ThresholdSweep,
    pub hd95_sweep: ThresholdSweep,
}

/// Optional restoration inputs for a report.
#[derive(Default)]
pub struct RestorationPairs<'a> {
    pub images: Vec<(&'a Image, &'a Image)>,
    pub kernels: Vec<(&'a BlurKernel, &'a BlurKernel)>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn compute(
        names: &[String],
        preds: &[ProbabilityMap],
        gts: &[BinaryMask],
        thresholds: &[f64],
        restoration: &RestorationPairs<'_>,
    ) -> Result<Self> {
        if names.len() != preds.len() {
            return param("one name per prediction required");
        }
        let (iou_max, aiu, isweep) = iou_sweep(preds, gts, thresholds)?;
        let (hd95_min, ahd95, hsweep) = hd95_sweep(preds, gts, thresholds)?;
        let (ti, th) = (isweep.argmax(), hsweep.argmin());
        let psnrs = restoration.images.iter().map(|(a, b)| psnr(a, b)).collect::<Result<Vec<_>>>()?;
        let ssims = restoration.images.iter().map(|(a, b)| ssim(a, b)).collect::<Result<Vec<_>>>()?;
        let kps: Vec<f64> = restoration.kernels.iter().map(|(p, g)| kernel_psnr(p, g)).collect();
        let per_image = names
            .iter()
            .enumerate()
            .map(|(i, name)| ImageMetrics {
                name: name.clone(),
                iou: isweep.per_image[i][ti],
                hd95: hsweep.per_image[i][th],
                psnr: psnrs.get(i).copied(),
                ssim: ssims.get(i).copied(),
            })
            .collect();
        Ok(Self {
            iou_max,
            aiu,
            hd95_min,
            ahd95,
            psnr: mean(&psnrs),
            ssim: mean(&ssims),
            kernel_psnr: mean(&kps),
            iou_threshold: thresholds[ti],
            hd95_threshold: thresholds[th],
            per_image,
            iou_sweep: isweep,
            hd95_sweep: hsweep,
        })
    }

    /// `threshold,IoU,HD95` rows.
    pub fn sweep_csv(&self) -> String {
        let mut out = String::from("threshold,IoU,HD95\n");
        for (i, t) in self.iou_sweep.thresholds.iter().enumerate() {
            out.push_str(&format!("{t},{},{}\n", self.iou_sweep.values[i], self.hd95_sweep.values[i]));
        }
        out
    }
}
