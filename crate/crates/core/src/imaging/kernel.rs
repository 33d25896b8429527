use std::f64::consts::PI;

use super::{BlurKernel, KERNEL_SIZE};
use crate::error::{param, Result};

/// Admissible range of each axis variance.
pub const VARIANCE_RANGE: (f64, f64) = (0.2, 4.0);
const RANGE_SLACK: f64 = 1e-12;

/// Rotated anisotropic Gaussian on the fixed kernel grid, normalized to sum 1.
///
/// `sigma_a` is the standard deviation along the axis rotated by `theta`
/// from the x (column) axis; `sigma_b` along the perpendicular axis.
pub fn gaussian_kernel(sigma_a: f64, sigma_b: f64, theta: f64) -> Result<BlurKernel> {
    for (name, s) in [("sigma_a", sigma_a), ("sigma_b", sigma_b)] {
        let var = s * s;
        if !s.is_finite() || s <= 0.0 || var < VARIANCE_RANGE.0 - RANGE_SLACK || var > VARIANCE_RANGE.1 + RANGE_SLACK {
            return param(format!("{name}^2 = {var} outside [0.2, 4.0]"));
        }
    }
    if !theta.is_finite() || !(0.0..PI).contains(&theta) {
        return param(format!("theta = {theta} outside [0, pi)"));
    }

    let (sin, cos) = theta.sin_cos();
    let (va, vb) = (sigma_a * sigma_a, sigma_b * sigma_b);
    // Inverse covariance of R diag(va, vb) R^T.
    let inv_xx = cos * cos / va + sin * sin / vb;
    let inv_yy = sin * sin / va + cos * cos / vb;
    let inv_xy = sin * cos * (1.0 / va - 1.0 / vb);

    let r = (KERNEL_SIZE / 2) as f64;
    let mut data = Vec::with_capacity(KERNEL_SIZE * KERNEL_SIZE);
    for row in 0..KERNEL_SIZE {
        let y = row as f64 - r;
        for col in 0..KERNEL_SIZE {
            let x = col as f64 - r;
            let q = inv_xx * x * x + 2.0 * inv_xy * x * y + inv_yy * y * y;
            data.push((-0.5 * q).exp());
        }
    }
    BlurKernel::from_weights(data)
}
