//! PNG codecs for color images (8-bit) and depth maps (16-bit millimeters).

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with values in [0, 1], top-left origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingAsset(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let what = path.display().to_string();
    let mut dec = png::Decoder::new(std::io::BufReader::new(open(path)?));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::parse(&what, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::parse(&what, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::parse(&what, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Loads an 8- or 16-bit PNG as RGB in [0, 1]. Gray is broadcast; alpha is dropped.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let (info, buf) = decode(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0
        } else {
            buf[i] as f64 / 255.0
        }
    };
    let mut img = RgbImage::new(w, h);
    for p in 0..w * h {
        for c in 0..3 {
            let src = if channels >= 3 { c } else { 0 };
            img.data[p * 3 + c] = sample(p * channels + src);
        }
    }
    Ok(img)
}

/// Writes an RGB image as 8-bit PNG (values clamped to [0, 1]).
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_image_data(&bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Loads a 16-bit depth PNG in millimeters as meters; 0 stays 0 (invalid).
pub fn load_depth_mm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let what = path.display().to_string();
    let (info, buf) = decode(path)?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type.samples() != 1 {
        return Err(Error::parse(what, "depth PNG must be 16-bit grayscale"));
    }
    let n = (info.width * info.height) as usize;
    let depth = (0..n)
        .map(|i| u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 1000.0)
        .collect();
    Ok((info.width as usize, info.height as usize, depth))
}

/// Writes meters as 16-bit millimeters (rounded, saturating at 65.535 m).
pub fn save_depth_mm(width: usize, height: usize, depth: &[f64], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut bytes = Vec::with_capacity(depth.len() * 2);
    for d in depth {
        let mm = if d.is_finite() && *d > 0.0 {
            (d * 1000.0).round().min(65535.0) as u16
        } else {
            0
        };
        bytes.extend_from_slice(&mm.to_be_bytes());
    }
    let mut w = enc
        .write_header()
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    w.write_image_data(&bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}
