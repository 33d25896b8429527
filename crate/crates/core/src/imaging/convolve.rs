use super::{BlurKernel, Image, KERNEL_SIZE};

/// Mirror index without edge repetition (`d c b | a b c d | c b a`), valid
/// for any offset.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// 2D convolution of every channel with `kernel`, reflect-padded, same size.
pub fn convolve(image: &Image, kernel: &BlurKernel) -> Image {
    let (h, w) = image.dims();
    let r = KERNEL_SIZE / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    // Flip once so the inner loop is a plain correlation.
    let flipped: Vec<f64> = kernel.values().iter().rev().copied().collect();

    let mut out = Vec::with_capacity(image.data().len());
    let mut padded = vec![0.0; ph * pw];
    for c in 0..image.channels() {
        let plane = image.plane(c);
        for py in 0..ph {
            let sy = reflect_index(py as isize - r as isize, h);
            for px in 0..pw {
                let sx = reflect_index(px as isize - r as isize, w);
                padded[py * pw + px] = plane[sy * w + sx];
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..KERNEL_SIZE {
                    let row = &padded[(y + ky) * pw + x..(y + ky) * pw + x + KERNEL_SIZE];
                    let krow = &flipped[ky * KERNEL_SIZE..(ky + 1) * KERNEL_SIZE];
                    acc += row.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>();
                }
                out.push(acc);
            }
        }
    }
    Image::new(h, w, image.channels(), out).expect("convolution preserves shape and finiteness")
}
