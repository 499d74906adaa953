//! Dense flow fields: pose-induced and ground-truth flow, warping, error
//! measures, resolution changes and Middlebury `.flo` I/O.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::imaging::ColorImage;
use crate::render::RenderBuffers;

/// Margin (meters) by which the observed surface must be nearer than the
/// reprojected point for that point to count as occluded.
pub const OCCLUSION_MARGIN: f64 = 0.005;

const FLO_MAGIC: &[u8; 4] = b"PIEH";
const FLO_UNKNOWN: f32 = 1e10;

/// Per-pixel displacement with a validity mask. Invalid entries hold `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub disp: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            disp: vec![Vector2::zeros(); width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn zeros_on(mask: &[bool], width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            disp: vec![Vector2::zeros(); width * height],
            valid: mask.to_vec(),
        }
    }

    pub fn constant(width: usize, height: usize, d: Vector2<f64>) -> Self {
        Self {
            width,
            height,
            disp: vec![d; width * height],
            valid: vec![true; width * height],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<Vector2<f64>> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.disp[i])
    }

    pub fn set(&mut self, x: usize, y: usize, d: Option<Vector2<f64>>) {
        let i = self.index(x, y);
        match d {
            Some(d) => {
                self.disp[i] = d;
                self.valid[i] = true;
            }
            None => {
                self.disp[i] = Vector2::zeros();
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.disp
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(d, _)| d.norm())
            .fold(0.0, f64::max)
    }

    fn check_dims(&self, other_w: usize, other_h: usize, what: &str) -> Result<()> {
        if self.width != other_w || self.height != other_h {
            return Err(Error::DimensionMismatch(format!(
                "{what}: {}x{} vs {other_w}x{other_h}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Average-pools by `factor` over valid pixels and rescales displacements.
    /// A coarse cell is valid when any of its pixels is.
    pub fn downsample(&self, factor: usize) -> FlowField {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = FlowField::invalid(w, h);
        let inv = 1.0 / factor as f64;
        for cy in 0..h {
            for cx in 0..w {
                let mut acc = Vector2::zeros();
                let mut n = 0usize;
                for y in cy * factor..(cy + 1) * factor {
                    for x in cx * factor..(cx + 1) * factor {
                        if let Some(d) = self.get(x, y) {
                            acc += d;
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    out.set(cx, cy, Some(acc / n as f64 * inv));
                }
            }
        }
        out
    }

    /// Writes Middlebury `.flo`; invalid pixels get the "unknown" sentinel.
    pub fn write_flo(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(12 + self.disp.len() * 8);
        bytes.extend_from_slice(FLO_MAGIC);
        bytes.extend_from_slice(&(self.width as i32).to_le_bytes());
        bytes.extend_from_slice(&(self.height as i32).to_le_bytes());
        for (d, &v) in self.disp.iter().zip(&self.valid) {
            let (u, w) = if v {
                (d.x as f32, d.y as f32)
            } else {
                (FLO_UNKNOWN, FLO_UNKNOWN)
            };
            bytes.extend_from_slice(&u.to_le_bytes());
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads Middlebury `.flo`. Components above 1e9 in magnitude mark invalid pixels.
    pub fn read_flo(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_flo_bytes(&bytes)
    }

    pub fn from_flo_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[0..4] != FLO_MAGIC {
            return Err(Error::InvalidFlowFile("missing PIEH magic".into()));
        }
        let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if w < 0 || h < 0 {
            return Err(Error::InvalidFlowFile(format!("bad dimensions {w}x{h}")));
        }
        let (w, h) = (w as usize, h as usize);
        let body = &bytes[12..];
        if body.len() != w * h * 8 {
            return Err(Error::InvalidFlowFile(format!(
                "expected {} payload bytes, found {}",
                w * h * 8,
                body.len()
            )));
        }
        let mut out = FlowField::invalid(w, h);
        for (i, c) in body.chunks_exact(8).enumerate() {
            let u = f32::from_le_bytes(c[0..4].try_into().unwrap());
            let v = f32::from_le_bytes(c[4..8].try_into().unwrap());
            if u.is_finite() && v.is_finite() && u.abs() <= 1e9 && v.abs() <= 1e9 {
                out.disp[i] = Vector2::new(u as f64, v as f64);
                out.valid[i] = true;
            }
        }
        Ok(out)
    }
}

/// Displacement of each visible surface point between its projection under
/// `p0` and under `pk`. Valid exactly on the render mask, minus points that
/// fall behind the camera under `pk`.
pub fn pose_induced_flow(buffers0: &RenderBuffers, p0: &RigidPose, pk: &RigidPose, k: &CameraIntrinsics) -> FlowField {
    let (w, h) = (buffers0.width, buffers0.height);
    let mut out = FlowField::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !buffers0.mask[i] {
                continue;
            }
            let p = &buffers0.coords[i];
            let u0 = p0
                .project(p, k)
                .map_or(Vector2::new(x as f64 + 0.5, y as f64 + 0.5), |q| q.pixel);
            if let Some(uk) = pk.project(p, k) {
                out.disp[i] = uk.pixel - u0;
                out.valid[i] = true;
            }
        }
    }
    out
}

/// Ground-truth flow from `p0` to `pgt`. With `target_depth` (the observed
/// scene's depth at `pgt`), pixels whose destination is covered by a nearer
/// surface, or falls outside the image, are invalidated.
pub fn gt_flow(
    buffers0: &RenderBuffers,
    p0: &RigidPose,
    pgt: &RigidPose,
    k: &CameraIntrinsics,
    target_depth: Option<&[f64]>,
) -> FlowField {
    let mut flow = pose_induced_flow(buffers0, p0, pgt, k);
    let Some(depth) = target_depth else {
        return flow;
    };
    let (w, h) = (flow.width, flow.height);
    for i in 0..w * h {
        if !flow.valid[i] {
            continue;
        }
        let p = &buffers0.coords[i];
        let Some(q) = pgt.project(p, k) else {
            continue;
        };
        let (tx, ty) = (q.pixel.x.floor(), q.pixel.y.floor());
        let visible = tx >= 0.0
            && ty >= 0.0
            && (tx as usize) < w
            && (ty as usize) < h
            && depth[ty as usize * w + tx as usize] >= q.depth - OCCLUSION_MARGIN;
        if !visible {
            flow.valid[i] = false;
            flow.disp[i] = Vector2::zeros();
        }
    }
    flow
}

/// Backward warp: `out(x) = image(x + flow(x))`, black where invalid or out of bounds.
pub fn warp(image: &ColorImage, flow: &FlowField) -> Result<ColorImage> {
    flow.check_dims(image.width, image.height, "warp")?;
    let mut out = ColorImage::black(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            if let Some(d) = flow.get(x, y) {
                if let Some(c) = image.sample_bilinear(x as f64 + d.x, y as f64 + d.y) {
                    out.set(x, y, c);
                }
            }
        }
    }
    Ok(out)
}

/// Mean endpoint errors over pixels valid in both fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowError {
    pub l1: f64,
    pub l2: f64,
    pub count: usize,
    /// Set when no pixel is valid in both fields (errors are then 0).
    pub empty: bool,
}

pub fn flow_error(pred: &FlowField, gt: &FlowField) -> Result<FlowError> {
    pred.check_dims(gt.width, gt.height, "flow_error")?;
    let (mut l1, mut l2, mut n) = (0.0, 0.0, 0usize);
    for i in 0..pred.disp.len() {
        if pred.valid[i] && gt.valid[i] {
            let d = pred.disp[i] - gt.disp[i];
            l1 += d.x.abs() + d.y.abs();
            l2 += d.norm();
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("flow_error: no mutually valid pixels");
        return Ok(FlowError {
            l1: 0.0,
            l2: 0.0,
            count: 0,
            empty: true,
        });
    }
    Ok(FlowError {
        l1: l1 / n as f64,
        l2: l2 / n as f64,
        count: n,
        empty: false,
    })
}

/// Hue encodes direction, saturation encodes magnitude relative to `max_mag`
/// (the field's own maximum when `None`). Invalid pixels are black.
pub fn flow_to_color(flow: &FlowField, max_mag: Option<f64>) -> ColorImage {
    let max_mag = max_mag.unwrap_or_else(|| flow.max_magnitude()).max(1e-9);
    ColorImage::from_fn(flow.width, flow.height, |x, y| match flow.get(x, y) {
        None => [0.0; 3],
        Some(d) => {
            let hue = (d.y.atan2(d.x) / std::f64::consts::TAU).rem_euclid(1.0) * 6.0;
            let sat = (d.norm() / max_mag).min(1.0);
            let c = sat;
            let xh = c * (1.0 - ((hue % 2.0) - 1.0).abs());
            let (r, g, b) = match hue as u32 {
                0 => (c, xh, 0.0),
                1 => (xh, c, 0.0),
                2 => (0.0, c, xh),
                3 => (0.0, xh, c),
                4 => (xh, 0.0, c),
                _ => (c, 0.0, xh),
            };
            let m = 1.0 - sat;
            [(r + m) as f32, (g + m) as f32, (b + m) as f32]
        }
    })
}
