//! Pixel weight maps that steer the SR loss toward cracks.
//!
//! All maps are constants from the point of view of differentiation.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, param, Result};
use crate::imaging::{distance_transform, BinaryMask, ClassProbs, Grid, LevelSetMap, ProbabilityMap};
use crate::losses::{dice_loss, gdice_loss, LossConfig, SegLossKind, WCE_EPS};

/// Which loss the fail-oriented weight multiplies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FoTarget {
    #[default]
    SrLoss,
    SegLoss,
}

fn default_m() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    #[serde(default)]
    pub use_lc_weight: bool,
    #[serde(default)]
    pub use_co_weight: bool,
    #[serde(default)]
    pub use_fo_weight: bool,
    #[serde(rename = "m_C", default = "default_m")]
    pub m_c: f64,
    #[serde(rename = "m_F", default = "default_m")]
    pub m_f: f64,
    #[serde(default)]
    pub fo_target: FoTarget,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            use_lc_weight: false,
            use_co_weight: false,
            use_fo_weight: false,
            m_c: 1.0,
            m_f: 1.0,
            fo_target: FoTarget::SrLoss,
        }
    }
}

impl WeightConfig {
    /// Candidate exponents `2^-3 ..= 2^3`.
    pub const M_GRID: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m_C", self.m_c), ("m_F", self.m_f)] {
            if !(v >= 0.0 && v.is_finite()) {
                return param(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Whether any map multiplies the SR loss.
    pub fn weights_sr(&self) -> bool {
        self.use_lc_weight || self.use_co_weight || (self.use_fo_weight && self.fo_target == FoTarget::SrLoss)
    }
}

/// `exp(-m_c * D)` with `D` the distance to the nearest crack pixel; all
/// ones when there is no crack.
pub fn co_weight_map(gt: &BinaryMask, m_c: f64) -> Result<Grid> {
    if gt.is_empty() {
        return Ok(Grid::filled(gt.height(), gt.width(), 1.0));
    }
    let d = distance_transform(gt)?;
    Ok(d.map(|v| (-m_c * v).exp()))
}

/// `exp(m_f * |p - g|)`.
pub fn fo_weight_map(pred: &ProbabilityMap, gt: &BinaryMask, m_f: f64) -> Result<Grid> {
    ensure_same_shape("fo weight", pred.dims(), gt.dims())?;
    let data =
        pred.data().iter().zip(gt.data()).map(|(&p, &g)| (m_f * (p - if g { 1.0 } else { 0.0 }).abs()).exp()).collect();
    Grid::new(gt.height(), gt.width(), data)
}

/// Per-pixel segmentation loss turned into a unit-mean weight map.
///
/// Each pixel combines its boundary mismatch `phi * (s - g)`, its weighted
/// cross-entropy term, and the global (generalized) Dice value as a
/// constant, using the composite loss coefficients. The map is `1 + raw`
/// divided by its mean, so a perfect prediction gives all ones.
pub fn seg_loss_map(pred: &ClassProbs, gt: &BinaryMask, levelset: &LevelSetMap, config: &LossConfig) -> Result<Grid> {
    ensure_same_shape("seg loss map", pred.dims(), gt.dims())?;
    ensure_same_shape("seg loss map", levelset.dims(), gt.dims())?;
    let [cb, cd, cg, cw] = config.loss.coefficients(config.alpha, config.gamma);
    let mut region = 0.0;
    if cd != 0.0 {
        region += cd * dice_loss(pred, gt, None)?.value;
    }
    if cg != 0.0 || config.loss == SegLossKind::Gbc {
        region += cg * gdice_loss(pred, gt, config.gdice_eps, None)?.value;
    }
    let class_w = config.class_weights();
    let (bg, fg) = (pred.plane(0), pred.plane(1));
    let raw: Vec<f64> = gt
        .data()
        .iter()
        .enumerate()
        .map(|(i, &g)| {
            let target = if g { 1.0 } else { 0.0 };
            let boundary = levelset.data()[i] * (fg[i] - target);
            let (p, c) = if g { (fg[i], class_w[1]) } else { (bg[i], class_w[0]) };
            let wce = -c * p.max(WCE_EPS).ln();
            1.0 + cb * boundary + region + cw * wce
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Grid::new(gt.height(), gt.width(), raw.into_iter().map(|v| v / mean).collect())
}

/// Mean over pixels of `pixel_loss` times the product of `maps`.
pub fn apply_weights(pixel_loss: &Grid, maps: &[&Grid]) -> Result<f64> {
    let total = match combine(pixel_loss.dims(), maps)? {
        Some(w) => pixel_loss.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>(),
        None => pixel_loss.data().iter().sum(),
    };
    Ok(total / pixel_loss.data().len() as f64)
}

/// Pixelwise product of `maps`, or `None` when there are none.
pub fn combine(dims: (usize, usize), maps: &[&Grid]) -> Result<Option<Grid>> {
    let Some((first, rest)) = maps.split_first() else {
        return Ok(None);
    };
    ensure_same_shape("weight map", first.dims(), dims)?;
    let mut acc = first.data().to_vec();
    for m in rest {
        ensure_same_shape("weight map", m.dims(), dims)?;
        for (a, b) in acc.iter_mut().zip(m.data()) {
            *a *= b;
        }
    }
    Ok(Some(Grid::new(dims.0, dims.1, acc)?))
}

/// Weight maps for one training item, split by the loss they multiply.
#[derive(Clone, Debug, Default)]
pub struct ItemWeights {
    pub sr: Option<Grid>,
    pub seg: Option<Grid>,
}

/// Builds the enabled maps for a prediction and its HR-resolution mask.
pub fn item_weights(
    cfg: &WeightConfig,
    loss: &LossConfig,
    pred: &ClassProbs,
    gt: &BinaryMask,
    levelset: &LevelSetMap,
) -> Result<ItemWeights> {
    let mut sr_maps = Vec::new();
    let mut seg = None;
    if cfg.use_lc_weight {
        sr_maps.push(seg_loss_map(pred, gt, levelset, loss)?);
    }
    if cfg.use_co_weight {
        sr_maps.push(co_weight_map(gt, cfg.m_c)?);
    }
    if cfg.use_fo_weight {
        let fo = fo_weight_map(&pred.crack(), gt, cfg.m_f)?;
        match cfg.fo_target {
            FoTarget::SrLoss => sr_maps.push(fo),
            FoTarget::SegLoss => seg = Some(fo),
        }
    }
    let refs: Vec<&Grid> = sr_maps.iter().collect();
    Ok(ItemWeights { sr: combine(gt.dims(), &refs)?, seg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::level_set;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn co_examples() {
        let gt = BinaryMask::from_fn(5, 5, |y, x| y == 2 && x == 2);
        let w = co_weight_map(&gt, 8.0).unwrap();
        assert_eq!(w.get(2, 2), 1.0);
        assert!((w.get(2, 3) - (-8.0f64).exp()).abs() < 1e-15);
        assert!((w.get(2, 3) - 3.35e-4).abs() < 1e-6);
        let empty = co_weight_map(&BinaryMask::empty(3, 3), 8.0).unwrap();
        assert!(empty.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn co_weights_follow_brute_force_distances_and_decay_along_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = BinaryMask::from_fn(12, 12, |_, _| rng.gen_bool(0.05));
            if gt.is_empty() {
                continue;
            }
            let w = co_weight_map(&gt, 0.5).unwrap();
            let pts = gt.points();
            for y in 0..12 {
                for x in 0..12 {
                    let d = pts
                        .iter()
                        .map(|&(py, px)| ((py as f64 - y as f64).powi(2) + (px as f64 - x as f64).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min);
                    assert!((w.get(y, x) - (-0.5 * d).exp()).abs() < 1e-12);
                }
            }
            // Moving t steps away from a crack can only lower D by at most t.
            for &(py, px) in &pts {
                for (dy, dx) in [(0i32, 1i32), (1, 0), (0, -1), (-1, 0), (1, 1)] {
                    let step = ((dy * dy + dx * dx) as f64).sqrt();
                    let (mut y, mut x, mut t) = (py as i32, px as i32, 0.0f64);
                    while (0..12).contains(&y) && (0..12).contains(&x) {
                        assert!(w.get(y as usize, x as usize) >= (-0.5 * t).exp() - 1e-12);
                        y += dy;
                        x += dx;
                        t += step;
                    }
                }
            }
        }
    }

    #[test]
    fn co_weights_decrease_along_rays_from_a_single_crack() {
        let gt = BinaryMask::from_fn(15, 15, |y, x| y == 7 && x == 5);
        let w = co_weight_map(&gt, 0.7).unwrap();
        for (dy, dx) in [(0i32, 1i32), (1, 0), (0, -1), (-1, 0), (1, 1), (-1, 2), (2, -1)] {
            let (mut y, mut x, mut prev) = (7i32, 5i32, f64::INFINITY);
            while (0..15).contains(&y) && (0..15).contains(&x) {
                let v = w.get(y as usize, x as usize);
                assert!(v < prev);
                prev = v;
                y += dy;
                x += dx;
            }
        }
    }

    #[test]
    fn fo_examples() {
        let gt = BinaryMask::from_fn(1, 3, |_, x| x == 0);
        let pred = ProbabilityMap::new(1, 3, vec![1.0, 1.0, 0.3]).unwrap();
        let w = fo_weight_map(&pred, &gt, 1.0).unwrap();
        assert_eq!(w.get(0, 0), 1.0);
        assert!((w.get(0, 1) - std::f64::consts::E).abs() < 1e-12);
        assert!(fo_weight_map(&pred, &gt, 0.0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn seg_map_is_flat_at_perfect_prediction() {
        let gt = BinaryMask::from_fn(8, 8, |y, x| x == y);
        let pred = ClassProbs::from_mask(&gt);
        let cfg = LossConfig { wce_class_weights: Some([1.0, 4.0]), ..Default::default() };
        let m = seg_loss_map(&pred, &gt, &level_set(&gt), &cfg).unwrap();
        assert!(m.data().iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn seg_map_emphasizes_wrong_pixels() {
        let gt = BinaryMask::from_fn(8, 8, |_, x| x < 4);
        let ls = level_set(&gt);
        // Rows 0..4 predicted correctly, rows 4..8 inverted.
        let crack: Vec<f64> = (0..64)
            .map(|i| {
                let (y, x) = (i / 8, i % 8);
                let g = if x < 4 { 0.9 } else { 0.1 };
                if y < 4 {
                    g
                } else {
                    1.0 - g
                }
            })
            .collect();
        let pred = ClassProbs::from_crack(&ProbabilityMap::new(8, 8, crack).unwrap());
        let m = seg_loss_map(&pred, &gt, &ls, &LossConfig::default()).unwrap();
        for x in 0..8 {
            assert!(m.get(6, x) > m.get(1, x));
        }
    }

    #[test]
    fn apply_weights_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let loss = Grid::new(4, 4, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mean = loss.mean();
        assert_eq!(apply_weights(&loss, &[]).unwrap(), mean);
        let ones = Grid::filled(4, 4, 1.0);
        assert!((apply_weights(&loss, &[&ones, &ones]).unwrap() - mean).abs() < 1e-15);
        let twos = Grid::filled(4, 4, 2.0);
        assert!((apply_weights(&loss, &[&twos]).unwrap() - 2.0 * mean).abs() < 1e-15);
        assert!(apply_weights(&loss, &[&Grid::filled(3, 4, 1.0)]).is_err());
    }

    #[test]
    fn config_json_keys() {
        let c: WeightConfig =
            serde_json::from_str(r#"{"use_fo_weight": true, "m_F": 2.0, "fo_target": "seg_loss"}"#).unwrap();
        assert!(c.use_fo_weight && c.m_f == 2.0 && c.fo_target == FoTarget::SegLoss);
        assert!(!c.weights_sr());
        assert!(WeightConfig { m_c: -1.0, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn apply_weights_matches_naive_loop(
            (h, w) in (1usize..8, 1usize..8),
            seed in any::<u64>(),
            k in 0usize..4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut grid = || Grid::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..3.0)).collect()).unwrap();
            let loss = grid();
            let maps: Vec<Grid> = (0..k).map(|_| grid()).collect();
            let refs: Vec<&Grid> = maps.iter().collect();
            let mut naive = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let mut v = loss.get(y, x);
                    for m in &maps {
                        v *= m.get(y, x);
                    }
                    naive += v;
                }
            }
            naive /= (h * w) as f64;
            prop_assert!((apply_weights(&loss, &refs).unwrap() - naive).abs() <= 1e-12 * naive.max(1.0));
        }

        #[test]
        fn maps_are_positive_finite_and_seg_map_unit_mean(seed in any::<u64>(), m in 0.0f64..8.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gt = BinaryMask::from_fn(8, 8, |_, _| rng.gen_bool(0.2));
            let crack: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let p = ProbabilityMap::new(8, 8, crack).unwrap();
            let pred = ClassProbs::from_crack(&p);
            let lc = seg_loss_map(&pred, &gt, &level_set(&gt), &LossConfig::default()).unwrap();
            prop_assert!((lc.mean() - 1.0).abs() < 1e-9);
            for g in [co_weight_map(&gt, m).unwrap(), fo_weight_map(&p, &gt, m).unwrap(), lc] {
                prop_assert!(g.data().iter().all(|v| *v > 0.0 && v.is_finite()));
            }
        }
    }
}
