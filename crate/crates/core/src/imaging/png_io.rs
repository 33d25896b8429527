//! PNG reading and writing. 8- and 16-bit files map to `[0, 1]` by dividing
//! by the bit-depth maximum. Written files may carry `tEXt` metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use super::{BinaryMask, Grid, Image, ProbabilityMap};
use crate::error::{Error, Result};

/// Sample depth of a decoded or written PNG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Depth {
    Eight,
    Sixteen,
}

impl Depth {
    fn max(self) -> f64 {
        match self {
            Depth::Eight => 255.0,
            Depth::Sixteen => 65535.0,
        }
    }
}

/// Decoded PNG: planar samples in `[0, 1]` plus metadata.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub depth: Depth,
    pub data: Vec<f64>,
    pub text: Vec<(String, String)>,
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Reads any PNG; palettes are expanded, alpha is dropped.
pub fn read(path: &Path) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| data_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| data_err(path, e))?;
    let text = reader.info().uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect();
    let size = reader.output_buffer_size().ok_or_else(|| data_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| data_err(path, e))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let depth = match info.bit_depth {
        BitDepth::Sixteen => Depth::Sixteen,
        BitDepth::Eight => Depth::Eight,
        other => return Err(data_err(path, format!("unsupported bit depth {other:?}"))),
    };
    let (stored, keep) = match info.color_type {
        ColorType::Grayscale => (1, 1),
        ColorType::GrayscaleAlpha => (2, 1),
        ColorType::Rgb => (3, 3),
        ColorType::Rgba => (4, 3),
        ColorType::Indexed => return Err(data_err(path, "palette was not expanded")),
    };
    let sample = |i: usize| -> f64 {
        match depth {
            Depth::Eight => buf[i] as f64,
            Depth::Sixteen => u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64,
        }
    };
    let n = width * height;
    let mut data = vec![0.0; n * keep];
    for p in 0..n {
        for c in 0..keep {
            data[c * n + p] = sample(p * stored + c) / depth.max();
        }
    }
    Ok(Decoded { height, width, channels: keep, depth, data, text })
}

/// Image dimensions from the header only.
pub fn read_dims(path: &Path) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| data_err(path, e))?;
    let reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(|e| data_err(path, e))?;
    let info = reader.info();
    Ok((info.height as usize, info.width as usize))
}

pub fn read_image(path: &Path) -> Result<(Image, Depth)> {
    let d = read(path)?;
    Ok((Image::new(d.height, d.width, d.channels, d.data)?, d.depth))
}

/// Reads a mask, averaging channels and binarizing at 0.5.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (img, _) = read_image(path)?;
    let gray = img.to_gray();
    BinaryMask::new(gray.height(), gray.width(), gray.data().iter().map(|&v| v >= 0.5).collect())
}

/// Reads a probability map (first channel).
pub fn read_probability(path: &Path) -> Result<ProbabilityMap> {
    let d = read(path)?;
    let n = d.height * d.width;
    ProbabilityMap::new(d.height, d.width, d.data[..n].to_vec())
}

fn write_raw(
    path: &Path,
    height: usize,
    width: usize,
    channels: usize,
    depth: Depth,
    planar: &[f64],
    text: &[(&str, String)],
) -> Result<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(if channels == 3 { ColorType::Rgb } else { ColorType::Grayscale });
    encoder.set_depth(match depth {
        Depth::Eight => BitDepth::Eight,
        Depth::Sixteen => BitDepth::Sixteen,
    });
    for (k, v) in text {
        encoder.add_text_chunk(k.to_string(), v.clone()).map_err(|e| data_err(path, e))?;
    }
    let n = height * width;
    let mut bytes = Vec::with_capacity(n * channels * 2);
    for p in 0..n {
        for c in 0..channels {
            let q = (planar[c * n + p].clamp(0.0, 1.0) * depth.max()).round();
            match depth {
                Depth::Eight => bytes.push(q as u8),
                Depth::Sixteen => bytes.extend_from_slice(&(q as u16).to_be_bytes()),
            }
        }
    }
    let mut writer = encoder.write_header().map_err(|e| data_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| data_err(path, e))?;
    writer.finish().map_err(|e| data_err(path, e))?;
    Ok(())
}

pub fn write_image(path: &Path, image: &Image, depth: Depth, text: &[(&str, String)]) -> Result<()> {
    write_raw(path, image.height(), image.width(), image.channels(), depth, image.data(), text)
}

pub fn write_mask(path: &Path, mask: &BinaryMask, text: &[(&str, String)]) -> Result<()> {
    let g = mask.to_grid();
    write_raw(path, g.height(), g.width(), 1, Depth::Eight, g.data(), text)
}

/// Writes a 16-bit grayscale probability map.
pub fn write_probability(path: &Path, map: &ProbabilityMap, text: &[(&str, String)]) -> Result<()> {
    let g: &Grid = map.grid();
    write_raw(path, g.height(), g.width(), 1, Depth::Sixteen, g.data(), text)
}
