//! Depth-buffered software rasterizer producing color, mask, depth and
//! model-frame coordinate buffers, plus region-of-interest cropping.
//!
//! Pixel `(x, y)` has its center at `(x + 0.5, y + 0.5)` in the continuous
//! image coordinates produced by [`CameraIntrinsics::project_camera_point`].
//! Coverage uses a top-left style tie rule so pixels on a shared edge belong
//! to exactly one triangle. Interpolation is perspective-correct.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose, MIN_DEPTH};
use crate::imaging::{save_mask_png, write_raw_f32, ColorImage};
use crate::mesh::TriangleMesh;

/// Crop side length used by the refinement pipeline.
pub const CROP_SIZE: u32 = 256;

/// Default fractional margin added on each side of the projected object.
pub const DEFAULT_ROI_PAD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffers {
    pub width: usize,
    pub height: usize,
    /// Camera-frame depth, `+inf` where nothing was drawn.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    /// Model-frame surface point per pixel; meaningful only where `mask` is set.
    pub coords: Vec<Vector3<f64>>,
    pub color: ColorImage,
}

impl RenderBuffers {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![f64::INFINITY; width * height],
            mask: vec![false; width * height],
            coords: vec![Vector3::zeros(); width * height],
            color: ColorImage::black(width, height),
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Writes `color.png`, `mask.png`, `depth.f32` and `coords.f32` (with
    /// JSON sidecars) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.color.save_png(dir.join("color.png"))?;
        save_mask_png(&self.mask, self.width, self.height, dir.join("mask.png"))?;
        write_raw_f32(
            dir,
            "depth",
            self.width,
            self.height,
            1,
            self.depth.iter().map(|&d| d as f32),
            Some("camera-frame depth in meters, +inf where empty"),
        )?;
        write_raw_f32(
            dir,
            "coords",
            self.width,
            self.height,
            3,
            self.coords.iter().zip(&self.mask).flat_map(|(c, &m)| {
                if m {
                    [c.x as f32, c.y as f32, c.z as f32]
                } else {
                    [f32::NAN; 3]
                }
            }),
            Some("model-frame surface point in meters, NaN where empty"),
        )?;
        Ok(())
    }
}

#[inline]
fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Boundary ownership for an edge of a positively oriented triangle. The
/// reversed edge of a neighbouring triangle always gets the opposite answer.
#[inline]
fn owns_edge(a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let d = b - a;
    d.y > 0.0 || (d.y == 0.0 && d.x < 0.0)
}

#[inline]
fn covers(w: f64, owned: bool) -> bool {
    w > 0.0 || (w == 0.0 && owned)
}

/// Rasterizes `mesh` at `pose` into a `k.width × k.height` frame.
///
/// Triangles with any vertex at or behind the camera plane are skipped.
pub fn rasterize(mesh: &TriangleMesh, pose: &RigidPose, k: &CameraIntrinsics) -> RenderBuffers {
    let (w, h) = (k.width as usize, k.height as usize);
    let mut buf = RenderBuffers::empty(w, h);
    if w == 0 || h == 0 {
        return buf;
    }
    let cam: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| pose.transform(v)).collect();

    for face in &mesh.faces {
        let mut idx = *face;
        let mut pc = idx.map(|i| cam[i as usize]);
        if pc.iter().any(|p| p.z <= MIN_DEPTH) {
            continue;
        }
        let mut s = pc.map(|p| Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy));
        let mut area = edge(&s[0], &s[1], &s[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        if area < 0.0 {
            s.swap(1, 2);
            pc.swap(1, 2);
            idx.swap(1, 2);
            area = -area;
        }
        let own = [
            owns_edge(&s[1], &s[2]),
            owns_edge(&s[2], &s[0]),
            owns_edge(&s[0], &s[1]),
        ];
        let min_x = s.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min((w - 1) as f64);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let y1 = (max_y - 0.5).floor().min((h - 1) as f64);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let verts = idx.map(|i| mesh.vertices[i as usize]);
        let inv_z = pc.map(|p| 1.0 / p.z);

        for py in y0 as usize..=y1 as usize {
            for px in x0 as usize..=x1 as usize {
                let p = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let e = [edge(&s[1], &s[2], &p), edge(&s[2], &s[0], &p), edge(&s[0], &s[1], &p)];
                if !(covers(e[0], own[0]) && covers(e[1], own[1]) && covers(e[2], own[2])) {
                    continue;
                }
                let q = [e[0] / area * inv_z[0], e[1] / area * inv_z[1], e[2] / area * inv_z[2]];
                let sum = q[0] + q[1] + q[2];
                let depth = 1.0 / sum;
                let i = py * w + px;
                if !(depth < buf.depth[i]) {
                    continue;
                }
                let bary = [q[0] / sum, q[1] / sum, q[2] / sum];
                let coord = verts[0] * bary[0] + verts[1] * bary[1] + verts[2] * bary[2];
                buf.depth[i] = depth;
                buf.mask[i] = true;
                buf.coords[i] = coord;
                buf.color.data[i] = mesh.texture.shade(&idx, bary, &coord);
            }
        }
    }
    buf
}

/// A mask pixel (center coordinates) with the model point seen through it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisiblePoint {
    pub pixel: Vector2<f64>,
    pub point: Vector3<f64>,
}

/// Samples the visible surface on a `stride`-spaced pixel grid.
pub fn visible_points(buffers: &RenderBuffers, stride: usize) -> Vec<VisiblePoint> {
    let stride = stride.max(1);
    let mut out = Vec::new();
    for y in (0..buffers.height).step_by(stride) {
        for x in (0..buffers.width).step_by(stride) {
            let i = buffers.index(x, y);
            if buffers.mask[i] {
                out.push(VisiblePoint {
                    pixel: Vector2::new(x as f64 + 0.5, y as f64 + 0.5),
                    point: buffers.coords[i],
                });
            }
        }
    }
    out
}

/// Square crop window in full-image pixels and the intrinsics that render
/// that window directly at `size × size`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub intrinsics: CameraIntrinsics,
}

impl Roi {
    /// Maps a full-image pixel coordinate into the crop frame.
    pub fn map_point(&self, u: &Vector2<f64>) -> Vector2<f64> {
        let s = self.intrinsics.width as f64 / self.side;
        Vector2::new((u.x - self.x0) * s, (u.y - self.y0) * s)
    }
}

/// Intrinsics equivalent to cropping `[x0, x0+side) × [y0, y0+side)` and
/// resizing to `size × size`. The principal point may fall outside the crop.
pub fn crop_intrinsics(k: &CameraIntrinsics, x0: f64, y0: f64, side: f64, size: u32) -> CameraIntrinsics {
    let s = size as f64 / side;
    CameraIntrinsics {
        fx: k.fx * s,
        fy: k.fy * s,
        cx: (k.cx - x0) * s,
        cy: (k.cy - y0) * s,
        width: size,
        height: size,
    }
}

/// Square box around the projected mesh vertices, padded by `pad` on each
/// side, shrunk/shifted to stay inside the image.
pub fn roi_from_pose(pose: &RigidPose, mesh: &TriangleMesh, k: &CameraIntrinsics, pad: f64, size: u32) -> Result<Roi> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let mut lo = Vector2::repeat(f64::INFINITY);
    let mut hi = Vector2::repeat(f64::NEG_INFINITY);
    for v in &mesh.vertices {
        let p = pose.project(v, k).ok_or(Error::ObjectOutOfView)?;
        lo = lo.inf(&p.pixel);
        hi = hi.sup(&p.pixel);
    }
    let (w, h) = (k.width as f64, k.height as f64);
    if hi.x <= 0.0 || hi.y <= 0.0 || lo.x >= w || lo.y >= h {
        return Err(Error::ObjectOutOfView);
    }
    let center = (lo + hi) / 2.0;
    let extent = (hi - lo).max();
    let side = (extent * (1.0 + 2.0 * pad)).min(w.min(h)).max(1.0);
    let x0 = (center.x - side / 2.0).clamp(0.0, w - side);
    let y0 = (center.y - side / 2.0).clamp(0.0, h - side);
    Ok(Roi {
        x0,
        y0,
        side,
        intrinsics: crop_intrinsics(k, x0, y0, side, size),
    })
}
