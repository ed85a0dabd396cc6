//! Grayscale and RGB image buffers plus PGM (P5) serialization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dimension(
                "gray_image",
                format!("{}x{} needs {} values, got {}", height, width, height * width, data.len()),
            ));
        }
        Ok(GrayImage {
            height,
            width,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Planar (channel-major) RGB image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Layout `[3, H, W]`.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn constant(height: usize, width: usize, color: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in color {
            data.extend(std::iter::repeat(c).take(height * width));
        }
        RgbImage {
            height,
            width,
            data,
        }
    }

    /// Replicate a grayscale image across all three channels.
    pub fn from_gray(g: &GrayImage) -> Self {
        let mut data = Vec::with_capacity(3 * g.data.len());
        for _ in 0..3 {
            data.extend_from_slice(&g.data);
        }
        RgbImage {
            height: g.height,
            width: g.width,
            data,
        }
    }

    /// Channel mean of the whole image.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Write a grayscale image as binary PGM (P5, maxval 255).
pub fn write_pgm(img: &GrayImage, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let bad = |detail: &str| Error::Schema {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if raw.len() < 2 || &raw[..2] != b"P5" {
        return Err(bad("not a P5 PGM"));
    }
    // Header: three whitespace-separated tokens after the magic, then one
    // whitespace byte, then raw pixel data.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < raw.len() && (raw[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
            while pos < raw.len() && (raw[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < raw.len() && (raw[pos] as char).is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + width * height {
        return Err(bad("truncated pixel data"));
    }
    let data = raw[pos..pos + width * height]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    GrayImage::new(height, width, data)
}
