use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{param, Error, Result};

/// Positive rational resize factor, kept in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub const HALF: Scale = Scale { num: 1, den: 2 };
    pub const QUARTER: Scale = Scale { num: 1, den: 4 };
    pub const EIGHTH: Scale = Scale { num: 1, den: 8 };
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return param(format!("scale {num}/{den} must be positive"));
        }
        let g = gcd(num, den);
        Ok(Self { num: num / g, den: den / g })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn factor(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn inverse(self) -> Scale {
        Scale { num: self.den, den: self.num }
    }

    /// Output length, or an error when `len * scale` is not an integer.
    pub fn apply(self, len: usize) -> Result<usize> {
        let scaled = len * self.num as usize;
        if !scaled.is_multiple_of(self.den as usize) {
            return param(format!("{len} * {self} is not integral"));
        }
        Ok(scaled / self.den as usize)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("cannot parse scale {s:?}; expected e.g. \"1/4\""));
        match s.split_once('/') {
            Some((n, d)) => Scale::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Scale::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl Serialize for Scale {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scale {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl schemars::JsonSchema for Scale {
    fn schema_name() -> std::borrow::Cow<'static, str> {
        "Scale".into()
    }

    fn json_schema(_: &mut schemars::SchemaGenerator) -> schemars::Schema {
        schemars::json_schema!({ "type": "string", "pattern": "^[0-9]+(/[0-9]+)?$" })
    }
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        1.5 * ax * ax * ax - 2.5 * ax * ax + 1.0
    } else if ax <= 2.0 {
        -0.5 * ax * ax * ax + 2.5 * ax * ax - 4.0 * ax + 2.0
    } else {
        0.0
    }
}

/// Source taps and weights for each output position along one axis.
/// Downscaling widens the kernel by `1/scale` (antialiasing); borders use
/// symmetric mirroring with edge repetition.
fn contributions(in_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let antialias = scale < 1.0;
    let width = if antialias { 4.0 / scale } else { 4.0 };
    let taps = width.ceil() as isize + 2;
    let n = in_len as isize;
    (1..=out_len)
        .map(|x| {
            let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut row: Vec<(usize, f64)> = (0..taps)
                .map(|p| {
                    let j = left + p;
                    let w = if antialias { scale * cubic(scale * (u - j as f64)) } else { cubic(u - j as f64) };
                    // 1-based j mirrored into [1, n] with edge repetition.
                    let m = (j - 1).rem_euclid(2 * n);
                    let src = if m < n { m } else { 2 * n - 1 - m };
                    (src as usize, w)
                })
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let total: f64 = row.iter().map(|&(_, w)| w).sum();
            for t in &mut row {
                t.1 /= total;
            }
            row
        })
        .collect()
}

/// Bicubic resampling by a rational factor on both axes.
pub fn bicubic_resize(image: &Image, scale: Scale) -> Result<Image> {
    let (h, w) = image.dims();
    let (oh, ow) = (scale.apply(h)?, scale.apply(w)?);
    if oh == 0 || ow == 0 {
        return param("resize would produce an empty image");
    }
    if scale == Scale::ONE {
        return Ok(image.clone());
    }
    let f = scale.factor();
    let rows = contributions(h, oh, f);
    let cols = contributions(w, ow, f);

    let mut out = Vec::with_capacity(oh * ow * image.channels());
    let mut tmp = vec![0.0; oh * w];
    for c in 0..image.channels() {
        let plane = image.plane(c);
        for (oy, taps) in rows.iter().enumerate() {
            let dst = &mut tmp[oy * w..(oy + 1) * w];
            dst.fill(0.0);
            for &(sy, wt) in taps {
                for (d, s) in dst.iter_mut().zip(&plane[sy * w..(sy + 1) * w]) {
                    *d += wt * s;
                }
            }
        }
        for oy in 0..oh {
            let src = &tmp[oy * w..(oy + 1) * w];
            for taps in &cols {
                out.push(taps.iter().map(|&(sx, wt)| wt * src[sx]).sum::<f64>());
            }
        }
    }
    Image::new(oh, ow, image.channels(), out)
}
