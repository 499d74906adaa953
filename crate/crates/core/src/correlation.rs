//! Hand-crafted feature grids, the all-pairs correlation pyramid and the two
//! ways of indexing it.
//!
//! Grid coordinates are in cells: cell `(i, j)` covers image pixels
//! `[f·i, f·i + f) × [f·j, f·j + f)` for downsample factor `f`, and
//! displacements on the grid are image displacements divided by `f`.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imaging::ColorImage;

/// Channels per cell: mean RGB, two gradients, 3×3 neighbourhood census.
pub const FEATURE_DIM: usize = 14;
/// Cell spacing of the census neighbours.
pub const CENSUS_STRIDE: usize = 2;
pub const DEFAULT_DOWNSAMPLE: usize = 4;
pub const DEFAULT_LEVELS: usize = 4;
pub const DEFAULT_RADIUS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub downsample: usize,
    /// Cell-major, `FEATURE_DIM` values per cell.
    pub data: Vec<f32>,
}

impl FeatureGrid {
    #[inline]
    pub fn cell(&self, i: usize) -> &[f32] {
        &self.data[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the per-cell descriptor grid of `image`.
///
/// Gradients are central differences of neighbouring cell-mean intensities.
/// The census holds the mean-intensity difference to the eight cells
/// `CENSUS_STRIDE` away (clamped at the border), with the cell's own
/// intensity standard deviation in the middle bin.
///
/// Each channel is standardized over the grid (zero-variance channels become
/// 0) and every cell vector is then L2-normalized (the zero vector stays zero).
pub fn extract_features(image: &ColorImage, downsample: usize) -> Result<FeatureGrid> {
    let f = downsample;
    if f == 0 || !image.width.is_multiple_of(f) || !image.height.is_multiple_of(f) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} is not divisible by downsample factor {f}",
            image.width, image.height
        )));
    }
    let (gw, gh) = (image.width / f, image.height / f);
    let w = image.width;
    let luma: Vec<f32> = (0..w * image.height).map(|i| image.intensity(i % w, i / w)).collect();
    let inv_cell = 1.0 / (f * f) as f32;

    let mut data = vec![0.0f32; gw * gh * FEATURE_DIM];
    let mut means = vec![0.0f32; gw * gh];
    let mut spread = vec![0.0f32; gw * gh];
    for c in 0..gw * gh {
        let (x0, y0) = ((c % gw) * f, (c / gw) * f);
        let mut rgb = [0.0f32; 3];
        let (mut m, mut m2) = (0.0f32, 0.0f32);
        for y in y0..y0 + f {
            for x in x0..x0 + f {
                let px = image.get(x, y);
                for ch in 0..3 {
                    rgb[ch] += px[ch];
                }
                let l = luma[y * w + x];
                m += l;
                m2 += l * l;
            }
        }
        m *= inv_cell;
        means[c] = m;
        spread[c] = (m2 * inv_cell - m * m).max(0.0).sqrt();
        for ch in 0..3 {
            data[c * FEATURE_DIM + ch] = rgb[ch] * inv_cell;
        }
    }

    // clamped cell-mean lookup
    let mean_at = |x: isize, y: isize| {
        let x = x.clamp(0, gw as isize - 1) as usize;
        let y = y.clamp(0, gh as isize - 1) as usize;
        means[y * gw + x]
    };
    let st = CENSUS_STRIDE as isize;
    for cy in 0..gh {
        for cx in 0..gw {
            let c = cy * gw + cx;
            let (x, y) = (cx as isize, cy as isize);
            let d = &mut data[c * FEATURE_DIM..(c + 1) * FEATURE_DIM];
            d[3] = (mean_at(x + 1, y) - mean_at(x - 1, y)) * 0.5;
            d[4] = (mean_at(x, y + 1) - mean_at(x, y - 1)) * 0.5;
            for a in 0..3isize {
                for b in 0..3isize {
                    d[5 + (a * 3 + b) as usize] = if a == 1 && b == 1 {
                        spread[c]
                    } else {
                        mean_at(x + (b - 1) * st, y + (a - 1) * st) - means[c]
                    };
                }
            }
        }
    }

    let n = (gw * gh) as f64;
    for ch in 0..FEATURE_DIM {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for c in 0..gw * gh {
            let v = data[c * FEATURE_DIM + ch] as f64;
            s += v;
            s2 += v * v;
        }
        let mu = s / n;
        let var = (s2 / n - mu * mu).max(0.0);
        let sd = var.sqrt();
        for c in 0..gw * gh {
            let v = &mut data[c * FEATURE_DIM + ch];
            *v = if sd > 1e-9 { ((*v as f64 - mu) / sd) as f32 } else { 0.0 };
        }
    }
    for cell in data.chunks_exact_mut(FEATURE_DIM) {
        let norm = cell.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            cell.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(FeatureGrid {
        width: gw,
        height: gh,
        downsample: f,
        data,
    })
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for c in 0..FEATURE_DIM {
        acc += a[c] * b[c];
    }
    acc
}

#[inline]
fn pool4(a: f32, b: f32, c: f32, d: f32) -> f32 {
    (a + b + c + d) * 0.25
}

/// Read access to a correlation pyramid, independent of storage.
pub trait CorrelationVolume: Sync {
    fn source_dims(&self) -> (usize, usize);
    fn num_levels(&self) -> usize;
    /// Target-map dimensions `(width, height)` at `level`.
    fn level_dims(&self, level: usize) -> (usize, usize);
    /// Correlation of source cell `src` with target cell `(tx, ty)` at `level`.
    fn value(&self, level: usize, src: usize, tx: usize, ty: usize) -> f32;
}

fn pyramid_dims(w: usize, h: usize, levels: usize) -> Vec<(usize, usize)> {
    (0..levels).map(|l| (w >> l, h >> l)).collect()
}

/// Materialized pyramid: level 0 holds every dot product, level `l` average
/// pools the target dimensions of level `l - 1` by 2.
#[derive(Debug, Clone)]
pub struct CorrelationPyramid {
    src_w: usize,
    src_h: usize,
    dims: Vec<(usize, usize)>,
    levels: Vec<Vec<f32>>,
}

fn check_pair(f1: &FeatureGrid, f2: &FeatureGrid, levels: usize) -> Result<()> {
    if f1.width != f2.width || f1.height != f2.height {
        return Err(Error::DimensionMismatch(format!(
            "feature grids {}x{} vs {}x{}",
            f1.width, f1.height, f2.width, f2.height
        )));
    }
    if levels == 0 || (f2.width >> (levels - 1)) == 0 || (f2.height >> (levels - 1)) == 0 {
        return Err(Error::InvalidConfig(format!(
            "{levels} pyramid levels do not fit a {}x{} grid",
            f2.width, f2.height
        )));
    }
    Ok(())
}

pub fn build_correlation(f1: &FeatureGrid, f2: &FeatureGrid, levels: usize) -> Result<CorrelationPyramid> {
    check_pair(f1, f2, levels)?;
    let (w, h) = (f2.width, f2.height);
    let n_src = f1.len();
    let n_tgt = f2.len();
    let dims = pyramid_dims(w, h, levels);

    // Channel-major copy of the target grid so the inner loop runs over targets.
    let mut f2t = vec![0.0f32; FEATURE_DIM * n_tgt];
    for t in 0..n_tgt {
        for c in 0..FEATURE_DIM {
            f2t[c * n_tgt + t] = f2.data[t * FEATURE_DIM + c];
        }
    }
    let mut level0 = vec![0.0f32; n_src * n_tgt];
    for (s, row) in level0.chunks_exact_mut(n_tgt).enumerate() {
        let a = f1.cell(s);
        // same summation order as `dot`: starts at 0, channels ascending
        for c in 0..FEATURE_DIM {
            let ac = a[c];
            let col = &f2t[c * n_tgt..(c + 1) * n_tgt];
            for (r, &b) in row.iter_mut().zip(col) {
                *r += ac * b;
            }
        }
    }
    let mut levels_data = vec![level0];
    for l in 1..levels {
        let (pw, ph) = dims[l - 1];
        let (lw, lh) = dims[l];
        let prev = &levels_data[l - 1];
        let mut cur = vec![0.0f32; n_src * lw * lh];
        for s in 0..n_src {
            let p = &prev[s * pw * ph..(s + 1) * pw * ph];
            let out = &mut cur[s * lw * lh..(s + 1) * lw * lh];
            for y in 0..lh {
                for x in 0..lw {
                    out[y * lw + x] = pool4(
                        p[2 * y * pw + 2 * x],
                        p[2 * y * pw + 2 * x + 1],
                        p[(2 * y + 1) * pw + 2 * x],
                        p[(2 * y + 1) * pw + 2 * x + 1],
                    );
                }
            }
        }
        levels_data.push(cur);
    }
    Ok(CorrelationPyramid {
        src_w: f1.width,
        src_h: f1.height,
        dims,
        levels: levels_data,
    })
}

impl CorrelationPyramid {
    /// Full target map of source cell `src` at `level`.
    pub fn row(&self, level: usize, src: usize) -> &[f32] {
        let (w, h) = self.dims[level];
        &self.levels[level][src * w * h..(src + 1) * w * h]
    }
}

impl CorrelationVolume for CorrelationPyramid {
    fn source_dims(&self) -> (usize, usize) {
        (self.src_w, self.src_h)
    }

    fn num_levels(&self) -> usize {
        self.dims.len()
    }

    fn level_dims(&self, level: usize) -> (usize, usize) {
        self.dims[level]
    }

    #[inline]
    fn value(&self, level: usize, src: usize, tx: usize, ty: usize) -> f32 {
        let (w, h) = self.dims[level];
        self.levels[level][src * w * h + ty * w + tx]
    }
}

/// On-demand pyramid: entries are recomputed from the feature grids on each
/// read, bit-identical to [`CorrelationPyramid`].
#[derive(Debug, Clone)]
pub struct LazyCorrelation {
    f1: FeatureGrid,
    f2: FeatureGrid,
    dims: Vec<(usize, usize)>,
}

impl LazyCorrelation {
    pub fn new(f1: FeatureGrid, f2: FeatureGrid, levels: usize) -> Result<Self> {
        check_pair(&f1, &f2, levels)?;
        let dims = pyramid_dims(f2.width, f2.height, levels);
        Ok(Self { f1, f2, dims })
    }
}

impl CorrelationVolume for LazyCorrelation {
    fn source_dims(&self) -> (usize, usize) {
        (self.f1.width, self.f1.height)
    }

    fn num_levels(&self) -> usize {
        self.dims.len()
    }

    fn level_dims(&self, level: usize) -> (usize, usize) {
        self.dims[level]
    }

    fn value(&self, level: usize, src: usize, tx: usize, ty: usize) -> f32 {
        if level == 0 {
            return dot(self.f1.cell(src), self.f2.cell(ty * self.f2.width + tx));
        }
        let l = level - 1;
        pool4(
            self.value(l, src, 2 * tx, 2 * ty),
            self.value(l, src, 2 * tx + 1, 2 * ty),
            self.value(l, src, 2 * tx, 2 * ty + 1),
            self.value(l, src, 2 * tx + 1, 2 * ty + 1),
        )
    }
}

/// Which flow positions the correlation windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupMode {
    /// Windows follow the pose-induced flow (reprojections of the shape).
    ShapeConstraint,
    /// Windows follow the previous intermediate flow.
    Standard,
}

/// Sampled correlation windows for every source cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub width: usize,
    pub height: usize,
    pub levels: usize,
    pub radius: usize,
    /// Per cell: level-major, then window rows (dy ascending), then dx ascending.
    pub data: Vec<f32>,
    /// Displacement (cells) at which each window is centered.
    pub base_flow: Vec<Vector2<f64>>,
    pub valid: Vec<bool>,
}

impl CorrelationMap {
    #[inline]
    pub fn window_len(&self) -> usize {
        (2 * self.radius + 1) * (2 * self.radius + 1)
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.levels * self.window_len()
    }

    pub fn cell(&self, i: usize) -> &[f32] {
        let c = self.channels();
        &self.data[i * c..(i + 1) * c]
    }

    /// Level-`level` window of cell `i`.
    pub fn window(&self, i: usize, level: usize) -> &[f32] {
        let wl = self.window_len();
        &self.cell(i)[level * wl..(level + 1) * wl]
    }

    /// Absolute level-0 window center of cell `i`, in cells.
    pub fn center(&self, i: usize) -> Vector2<f64> {
        Vector2::new((i % self.width) as f64, (i / self.width) as f64) + self.base_flow[i]
    }

    /// Window offset `(dx, dy)` of flattened window index `w`.
    #[inline]
    pub fn offset(&self, w: usize) -> (i64, i64) {
        let side = 2 * self.radius + 1;
        (
            (w % side) as i64 - self.radius as i64,
            (w / side) as i64 - self.radius as i64,
        )
    }
}

/// Bilinear read with zero padding: taps outside the map contribute 0.
fn sample_level<V: CorrelationVolume + ?Sized>(vol: &V, level: usize, src: usize, x: f64, y: f64) -> f32 {
    let (w, h) = vol.level_dims(level);
    let (xf, yf) = (x.floor(), y.floor());
    let (ax, ay) = ((x - xf) as f32, (y - yf) as f32);
    let (x0, y0) = (xf as i64, yf as i64);
    let tap = |tx: i64, ty: i64| -> f32 {
        if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
            0.0
        } else {
            vol.value(level, src, tx as usize, ty as usize)
        }
    };
    if ax == 0.0 && ay == 0.0 {
        return tap(x0, y0);
    }
    let top = tap(x0, y0) * (1.0 - ax) + tap(x0 + 1, y0) * ax;
    let bot = tap(x0, y0 + 1) * (1.0 - ax) + tap(x0 + 1, y0 + 1) * ax;
    top * (1.0 - ay) + bot * ay
}

fn lookup<V: CorrelationVolume + ?Sized>(
    vol: &V,
    base: impl Fn(usize) -> Option<Vector2<f64>>,
    radius: usize,
) -> Result<CorrelationMap> {
    if radius == 0 {
        return Err(Error::InvalidConfig("lookup radius must be at least 1".into()));
    }
    let (w, h) = vol.source_dims();
    let levels = vol.num_levels();
    let side = 2 * radius + 1;
    let wl = side * side;
    let channels = levels * wl;
    let mut data = vec![0.0f32; w * h * channels];
    let mut base_flow = vec![Vector2::zeros(); w * h];
    let mut valid = vec![false; w * h];
    let r = radius as i64;
    for src in 0..w * h {
        let Some(f) = base(src) else { continue };
        base_flow[src] = f;
        valid[src] = true;
        let x = Vector2::new((src % w) as f64, (src / w) as f64) + f;
        let out = &mut data[src * channels..(src + 1) * channels];
        for level in 0..levels {
            let scale = 1.0 / (1u64 << level) as f64;
            let (cx, cy) = (x.x * scale, x.y * scale);
            for dy in -r..=r {
                for dx in -r..=r {
                    let wi = ((dy + r) as usize) * side + (dx + r) as usize;
                    out[level * wl + wi] = sample_level(vol, level, src, cx + dx as f64, cy + dy as f64);
                }
            }
        }
    }
    Ok(CorrelationMap {
        width: w,
        height: h,
        levels,
        radius,
        data,
        base_flow,
        valid,
    })
}

fn check_flow_dims<V: CorrelationVolume + ?Sized>(vol: &V, flow: &FlowField) -> Result<()> {
    let (w, h) = vol.source_dims();
    if flow.width != w || flow.height != h {
        return Err(Error::DimensionMismatch(format!(
            "flow {}x{} vs correlation grid {w}x{h}",
            flow.width, flow.height
        )));
    }
    Ok(())
}

/// Windows centered at `x + flow(x)` for every cell. Invalid flow entries are
/// treated as zero displacement.
pub fn lookup_standard<V: CorrelationVolume + ?Sized>(
    vol: &V,
    flow: &FlowField,
    radius: usize,
) -> Result<CorrelationMap> {
    check_flow_dims(vol, flow)?;
    lookup(vol, |i| Some(flow.disp[i]), radius)
}

/// Windows centered at `x + pose_flow(x)`, i.e. on reprojections of the
/// object's surface. Cells without pose-induced flow get all-zero windows.
pub fn lookup_shape_constraint<V: CorrelationVolume + ?Sized>(
    vol: &V,
    pose_flow: &FlowField,
    radius: usize,
) -> Result<CorrelationMap> {
    check_flow_dims(vol, pose_flow)?;
    lookup(vol, |i| pose_flow.valid[i].then(|| pose_flow.disp[i]), radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, rng: &mut ChaCha8Rng) -> FeatureGrid {
        let mut data: Vec<f32> = (0..w * h * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for c in data.chunks_exact_mut(FEATURE_DIM) {
            let n = c.iter().map(|v| v * v).sum::<f32>().sqrt();
            c.iter_mut().for_each(|v| *v /= n);
        }
        FeatureGrid {
            width: w,
            height: h,
            downsample: 4,
            data,
        }
    }

    fn textured(w: usize, h: usize, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<[f32; 3]> = (0..(w / 3 + 2) * (h / 3 + 2))
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        ColorImage::from_fn(w, h, |x, y| blocks[(y / 3) * (w / 3 + 2) + x / 3])
    }

    #[test]
    fn constant_image_gives_zero_features() {
        let img = ColorImage::from_fn(16, 16, |_, _| [0.3, 0.6, 0.1]);
        let g = extract_features(&img, 4).unwrap();
        assert_eq!((g.width, g.height), (4, 4));
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_deterministic_and_normalized() {
        let img = textured(32, 32, 1);
        let a = extract_features(&img, 4).unwrap();
        let b = extract_features(&img, 4).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            let n: f32 = a.cell(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5 || n == 0.0);
        }
        assert!(extract_features(&textured(30, 32, 1), 4).is_err());
    }

    #[test]
    fn one_cell_shift_shifts_interior_features() {
        // Content surrounded by a wide black border so the set of cells is
        // unchanged by the shift and the channel statistics coincide.
        let inner = textured(24, 24, 9);
        let make = |ox: usize| {
            ColorImage::from_fn(48, 48, |x, y| {
                if (12 + ox..36 + ox).contains(&x) && (12..36).contains(&y) {
                    inner.get(x - 12 - ox, y - 12)
                } else {
                    [0.0; 3]
                }
            })
        };
        let a = extract_features(&make(0), 4).unwrap();
        let b = extract_features(&make(4), 4).unwrap();
        for cy in 1..11 {
            for cx in 1..10 {
                assert_eq!(a.cell(cy * 12 + cx), b.cell(cy * 12 + cx + 1), "cell ({cx},{cy})");
            }
        }
    }

    #[test]
    fn self_correlation_peaks_on_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(8, 8, &mut rng);
        let pyr = build_correlation(&g, &g, 2).unwrap();
        for s in 0..64 {
            let row = pyr.row(0, s);
            let arg = (0..64).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(arg, s);
        }
    }

    #[test]
    fn pyramid_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(64, 64, &mut rng);
        let pyr = build_correlation(&g, &g, 4).unwrap();
        assert_eq!(pyr.source_dims(), (64, 64));
        assert_eq!(pyr.level_dims(0), (64, 64));
        assert_eq!(pyr.level_dims(1), (32, 32));
        assert_eq!(pyr.level_dims(3), (8, 8));
        assert_eq!(pyr.row(1, 0).len(), 32 * 32);
        let other = random_grid(32, 64, &mut rng);
        assert!(build_correlation(&g, &other, 4).is_err());
    }

    #[test]
    fn correlation_matches_quadruple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (random_grid(8, 6, &mut rng), random_grid(8, 6, &mut rng));
        let pyr = build_correlation(&a, &b, 2).unwrap();
        for y1 in 0..6 {
            for x1 in 0..8 {
                for y2 in 0..6 {
                    for x2 in 0..8 {
                        let mut s = 0.0f64;
                        for c in 0..FEATURE_DIM {
                            s += a.data[(y1 * 8 + x1) * FEATURE_DIM + c] as f64
                                * b.data[(y2 * 8 + x2) * FEATURE_DIM + c] as f64;
                        }
                        assert!((pyr.value(0, y1 * 8 + x1, x2, y2) as f64 - s).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn pooled_levels_equal_block_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (random_grid(16, 16, &mut rng), random_grid(16, 16, &mut rng));
        let pyr = build_correlation(&a, &b, 4).unwrap();
        for level in 1..4 {
            let bs = 1usize << level;
            let (lw, lh) = pyr.level_dims(level);
            for src in (0..256).step_by(7) {
                for ty in 0..lh {
                    for tx in 0..lw {
                        let mut s = 0.0f64;
                        for y in ty * bs..(ty + 1) * bs {
                            for x in tx * bs..(tx + 1) * bs {
                                s += pyr.value(0, src, x, y) as f64;
                            }
                        }
                        let mean = s / (bs * bs) as f64;
                        assert!((pyr.value(level, src, tx, ty) as f64 - mean).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn lazy_volume_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (random_grid(16, 8, &mut rng), random_grid(16, 8, &mut rng));
        let pyr = build_correlation(&a, &b, 3).unwrap();
        let lazy = LazyCorrelation::new(a, b, 3).unwrap();
        for level in 0..3 {
            let (lw, lh) = pyr.level_dims(level);
            for src in 0..128 {
                for ty in 0..lh {
                    for tx in 0..lw {
                        assert_eq!(
                            pyr.value(level, src, tx, ty).to_bits(),
                            lazy.value(level, src, tx, ty).to_bits()
                        );
                    }
                }
            }
        }
        let mut flow = FlowField::invalid(16, 8);
        for i in 0..128 {
            flow.disp[i] = Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            flow.valid[i] = true;
        }
        assert_eq!(
            lookup_standard(&pyr, &flow, 2).unwrap(),
            lookup_standard(&lazy, &flow, 2).unwrap()
        );
    }

    #[test]
    fn zero_flow_window_is_own_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (random_grid(8, 8, &mut rng), random_grid(8, 8, &mut rng));
        let pyr = build_correlation(&a, &b, 1).unwrap();
        let map = lookup_standard(&pyr, &FlowField::constant(8, 8, Vector2::zeros()), 1).unwrap();
        assert_eq!(map.channels(), 9);
        let (x, y) = (3usize, 4usize);
        let win = map.window(y * 8 + x, 0);
        for (wi, &v) in win.iter().enumerate() {
            let (dx, dy) = map.offset(wi);
            let want = pyr.value(0, y * 8 + x, (x as i64 + dx) as usize, (y as i64 + dy) as usize);
            assert_eq!(v, want);
        }
        assert_eq!(win[4], pyr.value(0, y * 8 + x, x, y));
    }

    #[test]
    fn integer_flow_reads_shifted_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = (random_grid(12, 12, &mut rng), random_grid(12, 12, &mut rng));
        let pyr = build_correlation(&a, &b, 2).unwrap();
        let map = lookup_standard(&pyr, &FlowField::constant(12, 12, Vector2::new(2.0, 0.0)), 1).unwrap();
        for y in 1..11usize {
            for x in 1..8usize {
                for (wi, &v) in map.window(y * 12 + x, 0).iter().enumerate() {
                    let (dx, dy) = map.offset(wi);
                    let want = pyr.value(0, y * 12 + x, (x as i64 + 2 + dx) as usize, (y as i64 + dy) as usize);
                    assert_eq!(v, want);
                }
            }
        }
        // out-of-bounds taps read zero
        let far = lookup_standard(&pyr, &FlowField::constant(12, 12, Vector2::new(100.0, 0.0)), 1).unwrap();
        assert!(far.data.iter().all(|&v| v == 0.0));
    }

    /// Straightforward bilinear interpolation with zero padding on f64 values.
    fn oracle_sample(pyr: &CorrelationPyramid, level: usize, src: usize, x: f64, y: f64) -> f64 {
        let (w, h) = pyr.level_dims(level);
        let mut s = 0.0;
        let (x0, y0) = (x.floor(), y.floor());
        for (ix, wx) in [(x0, 1.0 - (x - x0)), (x0 + 1.0, x - x0)] {
            for (iy, wy) in [(y0, 1.0 - (y - y0)), (y0 + 1.0, y - y0)] {
                if ix >= 0.0 && iy >= 0.0 && (ix as usize) < w && (iy as usize) < h {
                    s += wx * wy * pyr.value(level, src, ix as usize, iy as usize) as f64;
                }
            }
        }
        s
    }

    #[test]
    fn fractional_flow_matches_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (random_grid(16, 16, &mut rng), random_grid(16, 16, &mut rng));
        let pyr = build_correlation(&a, &b, 3).unwrap();
        let mut flow = FlowField::invalid(16, 16);
        for i in 0..256 {
            flow.disp[i] = Vector2::new(rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0));
            flow.valid[i] = true;
        }
        let map = lookup_standard(&pyr, &flow, 2).unwrap();
        for src in 0..256 {
            let x = Vector2::new((src % 16) as f64, (src / 16) as f64) + flow.disp[src];
            for level in 0..3 {
                let sc = 1.0 / (1 << level) as f64;
                for (wi, &v) in map.window(src, level).iter().enumerate() {
                    let (dx, dy) = map.offset(wi);
                    let want = oracle_sample(&pyr, level, src, x.x * sc + dx as f64, x.y * sc + dy as f64);
                    assert!((v as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shape_lookup_zeroes_invalid_cells_and_centers_on_pose_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, b) = (random_grid(8, 8, &mut rng), random_grid(8, 8, &mut rng));
        let pyr = build_correlation(&a, &b, 2).unwrap();
        let mut pf = FlowField::invalid(8, 8);
        for i in (0..64).step_by(2) {
            pf.set(i % 8, i / 8, Some(Vector2::new(0.7, -1.2)));
        }
        let map = lookup_shape_constraint(&pyr, &pf, 1).unwrap();
        for i in 0..64 {
            assert_eq!(map.valid[i], pf.valid[i]);
            if pf.valid[i] {
                let c = map.center(i);
                assert_eq!(c, Vector2::new((i % 8) as f64 + 0.7, (i / 8) as f64 - 1.2));
            } else {
                assert!(map.cell(i).iter().all(|&v| v == 0.0));
            }
        }
        // zero pose flow on valid cells == standard lookup with zero flow there
        let zero = FlowField::zeros_on(&pf.valid, 8, 8);
        let shape = lookup_shape_constraint(&pyr, &zero, 1).unwrap();
        let std = lookup_standard(&pyr, &FlowField::constant(8, 8, Vector2::zeros()), 1).unwrap();
        for i in 0..64 {
            if pf.valid[i] {
                assert_eq!(shape.cell(i), std.cell(i));
            }
        }
        assert!(lookup_shape_constraint(&pyr, &FlowField::invalid(4, 8), 1).is_err());
        assert!(lookup_shape_constraint(&pyr, &pf, 0).is_err());
    }
}
