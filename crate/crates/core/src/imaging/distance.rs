use super::{BinaryMask, Grid, LevelSetMap};
use crate::error::{Error, Result};

const FAR: f64 = 1e20;

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) for one line of
/// squared distances. Exact for integer-valued inputs.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let fq = f[q] + (q * q) as f64;
        let mut s;
        loop {
            let p = v[k];
            s = (fq - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so k never underflows.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance to the nearest `true` pixel, exact.
fn squared_edt(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.dims();
    let n = h.max(w);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];

    let mut grid: Vec<f64> = mask.data().iter().map(|&m| if m { 0.0 } else { FAR }).collect();
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Exact Euclidean distance from every pixel to the nearest foreground pixel.
pub fn distance_transform(mask: &BinaryMask) -> Result<Grid> {
    if mask.is_empty() {
        return Err(Error::EmptyRegion("distance transform of an empty mask".into()));
    }
    let (h, w) = mask.dims();
    Grid::new(h, w, squared_edt(mask).into_iter().map(f64::sqrt).collect())
}

/// Signed distance to the opposite region: `-d(q, background)` inside the
/// mask, `+d(q, foreground)` outside. All zeros for empty or full masks.
pub fn level_set(mask: &BinaryMask) -> LevelSetMap {
    let (h, w) = mask.dims();
    if mask.is_empty() || mask.is_full() {
        return LevelSetMap::from_grid(Grid::filled(h, w, 0.0));
    }
    let to_fg = squared_edt(mask);
    let to_bg = squared_edt(&mask.inverted());
    let data = mask
        .data()
        .iter()
        .zip(to_fg.iter().zip(&to_bg))
        .map(|(&inside, (&dfg, &dbg))| if inside { -dbg.sqrt() } else { dfg.sqrt() })
        .collect();
    LevelSetMap::from_grid(Grid::new(h, w, data).expect("shape preserved"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
    }

    fn brute_force(mask: &BinaryMask, target: bool) -> Vec<f64> {
        let pts: Vec<(usize, usize)> = if target { mask.points() } else { mask.inverted().points() };
        let (h, w) = mask.dims();
        let mut out = vec![];
        for y in 0..h {
            for x in 0..w {
                let best = pts
                    .iter()
                    .map(|&(py, px)| {
                        let (dy, dx) = (py as f64 - y as f64, px as f64 - x as f64);
                        dy * dy + dx * dx
                    })
                    .fold(f64::INFINITY, f64::min);
                out.push(best.sqrt());
            }
        }
        out
    }

    #[test]
    fn single_corner_pixel() {
        let mask = BinaryMask::from_fn(3, 3, |y, x| y == 0 && x == 0);
        let d = distance_transform(&mask).unwrap();
        assert_eq!(d.get(2, 2), 8f64.sqrt());
        assert_eq!(d.get(0, 0), 0.0);
        assert_eq!(d.get(0, 2), 2.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(matches!(distance_transform(&BinaryMask::empty(4, 4)), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..50 {
            let h = rng.gen_range(1..=16);
            let w = rng.gen_range(1..=16);
            let mut mask = random_mask(&mut rng, h, w, [0.02, 0.1, 0.5][i % 3]);
            if mask.is_empty() {
                mask.set(h / 2, w / 2, true);
            }
            let fast = distance_transform(&mask).unwrap();
            assert_eq!(fast.data(), brute_force(&mask, true).as_slice());
        }
    }

    #[test]
    fn level_set_two_by_two() {
        let mask = BinaryMask::from_fn(2, 2, |_, x| x == 0);
        assert_eq!(level_set(&mask).data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn level_set_degenerate_masks_are_zero() {
        let full = BinaryMask::from_fn(5, 4, |_, _| true);
        assert!(level_set(&full).data().iter().all(|&v| v == 0.0));
        assert!(level_set(&BinaryMask::empty(5, 4)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn level_set_matches_brute_force_and_negates_under_inversion() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 50 {
            let density = rng.gen_range(0.05..0.6);
            let mask = random_mask(&mut rng, 16, 16, density);
            if mask.is_empty() || mask.is_full() {
                continue;
            }
            checked += 1;
            let phi = level_set(&mask);
            let to_fg = brute_force(&mask, true);
            let to_bg = brute_force(&mask, false);
            for (i, &inside) in mask.data().iter().enumerate() {
                let expected = if inside { -to_bg[i] } else { to_fg[i] };
                assert_eq!(phi.data()[i], expected);
                assert!(if inside { phi.data()[i] <= 0.0 } else { phi.data()[i] >= 0.0 });
            }
            let inv = level_set(&mask.inverted());
            assert!(phi.data().iter().zip(inv.data()).all(|(a, b)| *a == -*b));
        }
    }
}
