//! Minimal RGB float image plus PNG and raw-float export helpers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.data[y * self.width + x] = c;
    }

    /// Rec.601 luma.
    #[inline]
    pub fn intensity(&self, x: usize, y: usize) -> f32 {
        let [r, g, b] = self.get(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    /// Bilinear sample at continuous pixel coordinates where pixel `(i, j)`
    /// sits at integer position `(i, j)`. `None` outside the image.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<[f32; 3]> {
        if !(x >= 0.0 && y >= 0.0) || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        if fx == 0.0 && fy == 0.0 {
            return Some(self.get(x0, y0));
        }
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bot = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bot - top) * fy;
        }
        Some(out)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = self.get(x as usize, y as usize);
            image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32).0.map(|v| v as f32 / 255.0)
        })
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }
}

pub fn save_mask_png(mask: &[bool], width: usize, height: usize, path: impl AsRef<Path>) -> Result<()> {
    let img = image::GrayImage::from_fn(width as u32, height as u32, |x, y| {
        image::Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    img.save(path.as_ref())?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path.as_ref())?.to_luma8();
    let mask = img.pixels().map(|p| p.0[0] >= 128).collect();
    Ok((mask, img.width() as usize, img.height() as usize))
}

/// JSON sidecar accompanying a raw little-endian float32 dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dtype: String,
    pub byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// Writes `values` (row-major, interleaved channels) to `<stem>.f32` plus
/// `<stem>.json`.
pub fn write_raw_f32(
    dir: &Path,
    stem: &str,
    width: usize,
    height: usize,
    channels: usize,
    values: impl IntoIterator<Item = f32>,
    description: Option<&str>,
) -> Result<()> {
    let raw_path = dir.join(format!("{stem}.f32"));
    let file = File::create(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let mut w = BufWriter::new(file);
    let mut n = 0usize;
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&raw_path, e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io(&raw_path, e))?;
    if n != width * height * channels {
        return Err(Error::DimensionMismatch(format!(
            "raw dump {stem}: wrote {n} values, expected {}",
            width * height * channels
        )));
    }
    let sidecar = RawSidecar {
        width,
        height,
        channels,
        dtype: "float32".into(),
        byte_order: "little".into(),
        description: description.map(str::to_owned),
    };
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn read_raw_f32(dir: &Path, stem: &str) -> Result<(RawSidecar, Vec<f32>)> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: RawSidecar = serde_json::from_str(&text)?;
    let raw_path = dir.join(format!("{stem}.f32"));
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.len() != sidecar.width * sidecar.height * sidecar.channels {
        return Err(Error::DimensionMismatch(format!(
            "{}: {} values for {}x{}x{}",
            raw_path.display(),
            values.len(),
            sidecar.width,
            sidecar.height,
            sidecar.channels
        )));
    }
    Ok((sidecar, values))
}
