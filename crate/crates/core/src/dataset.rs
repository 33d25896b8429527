//! Image/mask pair ingestion, manifests, and synthetic crack data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::derive_seed;
use crate::error::{param, Error, Result};
use crate::imaging::{png_io, BinaryMask, Image};

pub const MANIFEST_VERSION: u32 = 1;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Fractions of records assigned to train and validation; the rest is test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1 }
    }
}

/// Split of a stem: a pure function of `(stem, seed)`.
pub fn split_for(stem: &str, seed: u64, ratios: SplitRatios) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stem.as_bytes());
    let d = h.finalize();
    let u = u64::from_le_bytes(d[..8].try_into().expect("digest length")) as f64 / (u64::MAX as f64 + 1.0);
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
}

impl SampleRecord {
    pub fn stem(&self) -> String {
        file_stem(&self.image)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub stem: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
    /// Files without a partner, relative to the dataset root.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unpaired: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<Rejection>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("manifest version {} is not supported", m.version)));
        }
        Ok(m)
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            out.insert(file_stem(&path), path);
        }
    }
    Ok(out)
}

/// Pairs `root/images/<stem>.png` with `root/masks/<stem>.png`.
///
/// Unpaired files and pairs whose dimensions differ are listed in the
/// manifest instead of failing. Errors when no valid pair exists.
pub fn ingest(root: &Path, seed: u64, ratios: SplitRatios) -> Result<Manifest> {
    let images = list_images(&root.join("images"))?;
    let masks = list_images(&root.join("masks"))?;
    let mut records = Vec::new();
    let mut unpaired = Vec::new();
    let mut rejected = Vec::new();
    for (stem, img) in &images {
        let Some(mask) = masks.get(stem) else {
            unpaired.push(format!("images/{}", img.file_name().unwrap_or_default().to_string_lossy()));
            continue;
        };
        let dims = (png_io::read_dims(img), png_io::read_dims(mask));
        match dims {
            (Ok(a), Ok(b)) if a == b => {
                records.push(SampleRecord {
                    image: img.clone(),
                    mask: mask.clone(),
                    split: split_for(stem, seed, ratios),
                    sidecar: None,
                });
            }
            (Ok(a), Ok(b)) => rejected.push(Rejection {
                stem: stem.clone(),
                reason: format!("image is {}x{} but mask is {}x{}", a.0, a.1, b.0, b.1),
            }),
            (Err(e), _) | (_, Err(e)) => rejected.push(Rejection { stem: stem.clone(), reason: e.to_string() }),
        }
    }
    for (stem, m) in &masks {
        if !images.contains_key(stem) {
            unpaired.push(format!("masks/{}", m.file_name().unwrap_or_default().to_string_lossy()));
        }
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no image/mask pairs found under {}", root.display())));
    }
    for r in &rejected {
        log::warn!("rejected {}: {}", r.stem, r.reason);
    }
    Ok(Manifest { version: MANIFEST_VERSION, seed, records, unpaired, rejected })
}

/// Named image with its crack mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: Image,
    pub mask: BinaryMask,
}

/// Loads every record of a split.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .map(|r| {
            let (image, _) = png_io::read_image(&r.image)?;
            let mask = png_io::read_mask(&r.mask)?;
            if image.dims() != mask.dims() {
                return Err(Error::Data(format!("{}: image and mask sizes differ", r.stem())));
            }
            Ok(Sample { name: r.stem(), image, mask })
        })
        .collect()
}

/// Writes samples as `dir/images/<name>.png` and `dir/masks/<name>.png`.
pub fn write_samples(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    for s in samples {
        png_io::write_image(&dir.join("images").join(format!("{}.png", s.name)), &s.image, png_io::Depth::Eight, &[])?;
        png_io::write_mask(&dir.join("masks").join(format!("{}.png", s.name)), &s.mask, &[])?;
    }
    Ok(())
}

/// Knobs of the synthetic crack generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthParams {
    pub crack_free_fraction: f64,
    /// Upper bound (exclusive) on the crack-pixel fraction of an image.
    pub max_crack_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { crack_free_fraction: 0.1, max_crack_fraction: 0.05 }
    }
}

/// Smooth random texture: a tinted base level plus a few low-frequency
/// waves and fine grain.
fn texture(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let base = rng.gen_range(0.5..0.75);
    let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = rng.gen_range(0.5..4.0) * std::f64::consts::TAU / size as f64;
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            (f * a.cos(), f * a.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.01..0.05))
        })
        .collect();
    let grain = rng.gen_range(0.01..0.04);
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let wave: f64 =
                waves.iter().map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            let noise = rng.gen_range(-grain..grain);
            for (c, t) in tint.iter().enumerate() {
                data[(c * size + y) * size + x] = (base + t + wave + noise).clamp(0.0, 1.0);
            }
        }
    }
    data
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn draw_polyline(mask: &mut BinaryMask, pts: &[(f64, f64)], width: f64) {
    let (h, w) = mask.dims();
    let r = width / 2.0;
    for seg in pts.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let y0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
        let y1 = ((a.0.max(b.0) + r).ceil() as usize).min(h - 1);
        let x0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
        let x1 = ((a.1.max(b.1) + r).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if segment_distance((y as f64, x as f64), a, b) <= r {
                    mask.set(y, x, true);
                }
            }
        }
    }
}

/// Random walk of 2 to 5 segments starting near the image border.
fn random_polyline(rng: &mut ChaCha8Rng, size: usize) -> Vec<(f64, f64)> {
    let s = size as f64;
    let mut p = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
    let mut angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut pts = vec![p];
    for _ in 0..rng.gen_range(2..=5) {
        angle += rng.gen_range(-0.8..0.8);
        let len = rng.gen_range(0.15..0.35) * s;
        p = ((p.0 + len * angle.sin()).clamp(0.0, s - 1.0), (p.1 + len * angle.cos()).clamp(0.0, s - 1.0));
        pts.push(p);
    }
    pts
}

fn crack_mask(rng: &mut ChaCha8Rng, size: usize, max_fraction: f64) -> BinaryMask {
    let limit = (max_fraction * (size * size) as f64).ceil() as usize;
    let lines: Vec<Vec<(f64, f64)>> = (0..rng.gen_range(1..=2)).map(|_| random_polyline(rng, size)).collect();
    let mut width = rng.gen_range(1..=3) as f64;
    loop {
        let mut mask = BinaryMask::empty(size, size);
        for l in &lines {
            draw_polyline(&mut mask, l, width);
        }
        if mask.count() < limit && !mask.is_empty() {
            return mask;
        }
        if width > 1.0 {
            width -= 1.0;
            continue;
        }
        // Thinnest line still too long: keep only the first segment pair.
        let mut mask = BinaryMask::empty(size, size);
        draw_polyline(&mut mask, &lines[0][..2], 1.0);
        return mask;
    }
}

/// Textured images with dark 1 to 3 px polyline cracks and exact masks.
pub fn synth_cracks(count: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    synth_cracks_with(count, size, seed, SynthParams::default())
}

pub fn synth_cracks_with(count: usize, size: usize, seed: u64, params: SynthParams) -> Result<Vec<Sample>> {
    if size < 32 {
        return param(format!("synthetic image size {size} is below 32"));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut data = texture(&mut rng, size);
            let mask = if rng.gen_bool(params.crack_free_fraction) {
                BinaryMask::empty(size, size)
            } else {
                crack_mask(&mut rng, size, params.max_crack_fraction)
            };
            let depth = rng.gen_range(0.55..0.8);
            for (p, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
                for c in 0..3 {
                    let v = &mut data[c * size * size + p];
                    *v *= 1.0 - depth;
                }
            }
            Ok(Sample { name: format!("synth_{i:05}"), image: Image::new(size, size, 3, data)?, mask })
        })
        .collect()
}

/// Generic images (textures with bright and dark shapes and strokes) for
/// SR pre-training.
pub fn synth_textures(count: usize, size: usize, seed: u64) -> Result<Vec<Image>> {
    if size < 16 {
        return param(format!("texture size {size} is below 16"));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x7e47_07e5, i as u64));
            let mut data = texture(&mut rng, size);
            let n = size * size;
            for _ in 0..rng.gen_range(1..=4) {
                let mut shape = BinaryMask::empty(size, size);
                if rng.gen_bool(0.5) {
                    let pts = random_polyline(&mut rng, size);
                    draw_polyline(&mut shape, &pts, rng.gen_range(1..=4) as f64);
                } else {
                    let (cy, cx) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
                    let r = rng.gen_range(2.0..size as f64 / 4.0);
                    shape = BinaryMask::from_fn(size, size, |y, x| (y as f64 - cy).hypot(x as f64 - cx) <= r);
                }
                let level = rng.gen_range(0.0..1.0);
                for p in 0..n {
                    if shape.data()[p] {
                        for c in 0..3 {
                            data[c * n + p] = 0.5 * data[c * n + p] + 0.5 * level;
                        }
                    }
                }
            }
            Image::new(size, size, 3, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_statistics() {
        let samples = synth_cracks(1000, 64, 3).unwrap();
        let free = samples.iter().filter(|s| s.mask.is_empty()).count() as f64 / 1000.0;
        assert!((0.07..=0.13).contains(&free), "crack-free fraction {free}");
        for s in &samples {
            assert!((s.mask.count() as f64) < 0.05 * 4096.0, "{} has {} crack pixels", s.name, s.mask.count());
        }
        // Crack pixels are darker than the rest of the image.
        let s = samples.iter().find(|s| !s.mask.is_empty()).unwrap();
        let g = s.image.to_gray();
        let (mut inside, mut outside) = (0.0, 0.0);
        for (p, &m) in s.mask.data().iter().enumerate() {
            if m {
                inside += g.data()[p] / s.mask.count() as f64
            } else {
                outside += g.data()[p] / (4096 - s.mask.count()) as f64
            }
        }
        assert!(inside < 0.6 * outside);
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(synth_cracks(5, 32, 9).unwrap(), synth_cracks(5, 32, 9).unwrap());
        assert_ne!(synth_cracks(5, 32, 9).unwrap(), synth_cracks(5, 32, 10).unwrap());
        assert_eq!(synth_textures(3, 32, 1).unwrap(), synth_textures(3, 32, 1).unwrap());
        assert!(synth_cracks(1, 16, 0).is_err());
    }

    #[test]
    fn split_is_pure_and_roughly_proportional() {
        let r = SplitRatios::default();
        assert_eq!(split_for("a", 1, r), split_for("a", 1, r));
        let train = (0..1000).filter(|i| split_for(&format!("img{i}"), 4, r) == Split::Train).count();
        assert!((740..=860).contains(&train));
    }

    fn write_pair(root: &Path, stem: &str, img: (usize, usize), mask: (usize, usize)) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        png_io::write_image(
            &root.join(format!("images/{stem}.png")),
            &Image::filled(img.0, img.1, 3, 0.5).unwrap(),
            png_io::Depth::Eight,
            &[],
        )
        .unwrap();
        png_io::write_mask(&root.join(format!("masks/{stem}.png")), &BinaryMask::empty(mask.0, mask.1), &[]).unwrap();
    }

    #[test]
    fn ingest_examples() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ingest(dir.path(), 0, SplitRatios::default()), Err(Error::Data(_))));
        for s in ["a", "b", "c"] {
            write_pair(dir.path(), s, (8, 8), (8, 8));
        }
        let m = ingest(dir.path(), 0, SplitRatios::default()).unwrap();
        assert_eq!(m.records.len(), 3);
        assert!(m.rejected.is_empty() && m.unpaired.is_empty());

        write_pair(dir.path(), "d", (8, 8), (4, 8));
        png_io::write_mask(&dir.path().join("masks/orphan.png"), &BinaryMask::empty(2, 2), &[]).unwrap();
        let m = ingest(dir.path(), 0, SplitRatios::default()).unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.rejected.len(), 1);
        assert_eq!(m.rejected[0].stem, "d");
        assert_eq!(m.unpaired, vec!["masks/orphan.png".to_string()]);

        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
    }

    #[test]
    fn samples_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_cracks(4, 32, 2).unwrap();
        write_samples(dir.path(), &samples).unwrap();
        let m = ingest(dir.path(), 1, SplitRatios { train: 1.0, val: 0.0 }).unwrap();
        let loaded = load_split(&m, Split::Train).unwrap();
        assert_eq!(loaded.len(), 4);
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.mask, b.mask);
            assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
        }
    }
}
