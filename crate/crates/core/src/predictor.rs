//! Intermediate-flow prediction from sampled correlation windows.
//!
//! [`FlowPredictor`] is the seam where a learned recurrent update could be
//! dropped in; [`SoftArgmaxPredictor`] is the deterministic implementation
//! used by the refiner.

use nalgebra::Vector2;

use crate::correlation::{CorrelationMap, FeatureGrid};
use crate::error::{Error, Result};
use crate::flow::FlowField;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
/// Windows whose best level-0 correlation is below this are treated as ambiguous.
pub const MIN_PEAK_CORRELATION: f32 = 0.3;

/// Everything one predictor step may look at. All fields are at grid resolution.
#[derive(Debug, Clone, Copy)]
pub struct PredictorInput<'a> {
    pub correlation: &'a CorrelationMap,
    pub pose_flow: &'a FlowField,
    /// Intermediate flow of the previous iteration, if any.
    pub prev_flow: Option<&'a FlowField>,
    /// 1-based iteration index.
    pub iteration: usize,
}

impl PredictorInput<'_> {
    fn check(&self) -> Result<()> {
        let c = self.correlation;
        let dims_ok = |f: &FlowField| f.width == c.width && f.height == c.height;
        if !dims_ok(self.pose_flow) || !self.prev_flow.is_none_or(dims_ok) {
            return Err(Error::DimensionMismatch(format!(
                "predictor input flows do not match the {}x{} correlation grid",
                c.width, c.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub flow: FlowField,
    /// Per-cell confidence in `[0, 1]`; 0 on invalid or ambiguous cells.
    pub confidence: Vec<f32>,
}

pub trait FlowPredictor: Send + Sync {
    fn predict(&self, input: &PredictorInput<'_>) -> Result<Prediction>;
}

/// Soft-argmax over the level-0 window around its best match: the residual
/// is the softmax-weighted mean offset and the confidence is the largest weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftArgmaxPredictor {
    pub temperature: f64,
    pub min_correlation: f32,
}

impl Default for SoftArgmaxPredictor {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            min_correlation: MIN_PEAK_CORRELATION,
        }
    }
}

impl SoftArgmaxPredictor {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        Ok(Self {
            temperature,
            ..Self::default()
        })
    }

    /// Residual offset and confidence for one level-0 window.
    ///
    /// The softmax runs over the 3×3 neighbourhood of the window's argmax
    /// (ties go to the entry nearest the window center); the confidence is
    /// the largest softmax weight.
    pub fn soft_argmax(&self, corr: &CorrelationMap, window: &[f32]) -> (Vector2<f64>, f32) {
        self.soft_argmax_radius(window, corr.radius)
    }

    fn soft_argmax_radius(&self, window: &[f32], radius: usize) -> (Vector2<f64>, f32) {
        let side = 2 * radius + 1;
        let r = radius as i64;
        let offset = |w: usize| ((w % side) as i64 - r, (w / side) as i64 - r);
        let dist = |w: usize| {
            let (dx, dy) = offset(w);
            dx * dx + dy * dy
        };
        let best = (0..window.len()).fold(0, |b, j| {
            if window[j] > window[b] || (window[j] == window[b] && dist(j) < dist(b)) {
                j
            } else {
                b
            }
        });
        let peak = window[best];
        if !(peak >= self.min_correlation) {
            return (Vector2::zeros(), 0.0);
        }
        let (bx, by) = offset(best);
        let inv_t = 1.0 / self.temperature;
        let mut sum = 0.0f64;
        let mut acc = Vector2::zeros();
        for (wi, &c) in window.iter().enumerate() {
            let (dx, dy) = offset(wi);
            if (dx - bx).abs() > 1 || (dy - by).abs() > 1 {
                continue;
            }
            let e = ((c - peak) as f64 * inv_t).exp();
            sum += e;
            acc += Vector2::new(dx as f64, dy as f64) * e;
        }
        // the peak entry contributes exp(0) = 1
        (acc / sum, (1.0 / sum) as f32)
    }

    /// Residual each source cell would report against an exact copy of
    /// itself: the soft-argmax of its 3×3 feature autocorrelation.
    pub fn self_bias(&self, features: &FeatureGrid) -> Vec<Vector2<f64>> {
        let (w, h) = (features.width as i64, features.height as i64);
        (0..features.len())
            .map(|i| {
                let (x, y) = (i as i64 % w, i as i64 / w);
                let a = features.cell(i);
                let mut win = [0.0f32; 9];
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0 && ny >= 0 && nx < w && ny < h {
                            let b = features.cell((ny * w + nx) as usize);
                            win[((dy + 1) * 3 + dx + 1) as usize] = a.iter().zip(b).map(|(p, q)| p * q).sum();
                        }
                    }
                }
                self.soft_argmax_radius(&win, 1).0
            })
            .collect()
    }
}

/// [`SoftArgmaxPredictor`] with each cell's self bias subtracted, so that a
/// target identical to the source yields exactly zero residual.
#[derive(Debug, Clone, PartialEq)]
pub struct DebiasedPredictor {
    pub inner: SoftArgmaxPredictor,
    pub bias: Vec<Vector2<f64>>,
}

impl DebiasedPredictor {
    pub fn new(inner: SoftArgmaxPredictor, source: &FeatureGrid) -> Self {
        let bias = inner.self_bias(source);
        Self { inner, bias }
    }
}

impl FlowPredictor for DebiasedPredictor {
    fn predict(&self, input: &PredictorInput<'_>) -> Result<Prediction> {
        let c = input.correlation;
        if self.bias.len() != c.width * c.height {
            return Err(Error::DimensionMismatch(format!(
                "{} bias entries for a {}x{} correlation grid",
                self.bias.len(),
                c.width,
                c.height
            )));
        }
        let mut out = self.inner.predict(input)?;
        for (i, d) in out.flow.disp.iter_mut().enumerate() {
            if out.flow.valid[i] && out.confidence[i] > 0.0 {
                *d -= self.bias[i];
            }
        }
        Ok(out)
    }
}

impl FlowPredictor for SoftArgmaxPredictor {
    fn predict(&self, input: &PredictorInput<'_>) -> Result<Prediction> {
        input.check()?;
        let corr = input.correlation;
        let n = corr.width * corr.height;
        let mut flow = FlowField::invalid(corr.width, corr.height);
        let mut confidence = vec![0.0f32; n];
        for i in 0..n {
            if !input.pose_flow.valid[i] {
                continue;
            }
            let (residual, conf) = if corr.valid[i] {
                self.soft_argmax(corr, corr.window(i, 0))
            } else {
                (Vector2::zeros(), 0.0)
            };
            flow.disp[i] = corr.base_flow[i] + residual;
            flow.valid[i] = true;
            confidence[i] = conf;
        }
        Ok(Prediction { flow, confidence })
    }
}

/// Bilinear upsampling of displacements (scaled by `factor`); validity is
/// nearest-neighbour. Only valid cells contribute to the interpolation.
pub fn upsample_flow(grid: &FlowField, factor: usize) -> FlowField {
    let (gw, gh) = (grid.width, grid.height);
    let (w, h) = (gw * factor, gh * factor);
    let mut out = FlowField::invalid(w, h);
    let f = factor as f64;
    for y in 0..h {
        let gy = ((y as f64 + 0.5) / f - 0.5).clamp(0.0, (gh - 1) as f64);
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let ay = gy - y0 as f64;
        for x in 0..w {
            if !grid.valid[(y / factor) * gw + x / factor] {
                continue;
            }
            let gx = ((x as f64 + 0.5) / f - 0.5).clamp(0.0, (gw - 1) as f64);
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let ax = gx - x0 as f64;
            let mut acc = Vector2::zeros();
            let mut wsum = 0.0;
            for (cx, cy, wt) in [
                (x0, y0, (1.0 - ax) * (1.0 - ay)),
                (x1, y0, ax * (1.0 - ay)),
                (x0, y1, (1.0 - ax) * ay),
                (x1, y1, ax * ay),
            ] {
                if wt > 0.0 && grid.valid[cy * gw + cx] {
                    acc += grid.disp[cy * gw + cx] * wt;
                    wsum += wt;
                }
            }
            let d = if wsum > 0.0 {
                acc / wsum
            } else {
                grid.disp[(y / factor) * gw + x / factor]
            };
            out.set(x, y, Some(d * f));
        }
    }
    out
}

/// Nearest-neighbour upsampling of a per-cell scalar.
pub fn upsample_scalar(values: &[f32], gw: usize, gh: usize, factor: usize) -> Vec<f32> {
    let w = gw * factor;
    (0..gh * factor * w)
        .map(|i| values[(i / w / factor) * gw + (i % w) / factor])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_with(radius: usize, windows: Vec<Vec<f32>>, w: usize, h: usize) -> CorrelationMap {
        let side = 2 * radius + 1;
        let data: Vec<f32> = windows.into_iter().flatten().collect();
        assert_eq!(data.len(), w * h * side * side);
        CorrelationMap {
            width: w,
            height: h,
            levels: 1,
            radius,
            data,
            base_flow: vec![Vector2::new(0.5, -0.25); w * h],
            valid: vec![true; w * h],
        }
    }

    #[test]
    fn one_hot_window_recovers_offset() {
        let r = 4;
        let side = 2 * r + 1;
        let mut win = vec![0.0f32; side * side];
        win[(1 + r) * side + (2 + r)] = 1.0; // offset (2, 1)
        let map = map_with(r, vec![win], 1, 1);
        let pose = FlowField::constant(1, 1, Vector2::new(0.5, -0.25));
        let p = SoftArgmaxPredictor::new(0.01).unwrap();
        let out = p
            .predict(&PredictorInput {
                correlation: &map,
                pose_flow: &pose,
                prev_flow: None,
                iteration: 1,
            })
            .unwrap();
        let d = out.flow.get(0, 0).unwrap();
        assert!((d - Vector2::new(2.5, 0.75)).norm() < 1e-6);
        assert!(out.confidence[0] > 0.999);
    }

    #[test]
    fn uniform_window_gives_zero_residual() {
        let map = map_with(2, vec![vec![0.5; 25]], 1, 1);
        let (res, conf) = SoftArgmaxPredictor::default().soft_argmax(&map, map.window(0, 0));
        assert!(res.norm() < 1e-12);
        assert!((conf - 1.0 / 9.0).abs() < 1e-6);
    }

    #[test]
    fn weak_windows_fall_back_to_zero() {
        let map = map_with(1, vec![vec![0.1; 9]], 1, 1);
        let (res, conf) = SoftArgmaxPredictor::default().soft_argmax(&map, map.window(0, 0));
        assert_eq!((res, conf), (Vector2::zeros(), 0.0));
    }

    #[test]
    fn residual_stays_inside_window_and_low_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = 3;
        let side = 2 * r + 1;
        for _ in 0..500 {
            let win: Vec<f32> = (0..side * side).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let map = map_with(r, vec![win.clone()], 1, 1);
            let soft = SoftArgmaxPredictor::default().soft_argmax(&map, &win).0;
            assert!(soft.x.abs() <= r as f64 && soft.y.abs() <= r as f64);
            let mut sorted = win.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            if sorted[0] < MIN_PEAK_CORRELATION || sorted[0] - sorted[1] < 0.02 {
                continue;
            }
            let arg = (0..win.len()).max_by(|&a, &b| win[a].total_cmp(&win[b])).unwrap();
            let (dx, dy) = map.offset(arg);
            let sharp = SoftArgmaxPredictor::new(1e-3).unwrap().soft_argmax(&map, &win).0;
            assert!((sharp - Vector2::new(dx as f64, dy as f64)).norm() < 1e-6);
        }
    }

    #[test]
    fn validity_follows_pose_flow() {
        let map = map_with(1, vec![vec![0.9; 9]; 4], 2, 2);
        let mut pose = FlowField::constant(2, 2, Vector2::zeros());
        pose.set(1, 0, None);
        let out = SoftArgmaxPredictor::default()
            .predict(&PredictorInput {
                correlation: &map,
                pose_flow: &pose,
                prev_flow: None,
                iteration: 1,
            })
            .unwrap();
        assert_eq!(out.flow.valid, pose.valid);
        assert!(SoftArgmaxPredictor::new(0.0).is_err());
        let bad = FlowField::invalid(3, 2);
        assert!(SoftArgmaxPredictor::default()
            .predict(&PredictorInput {
                correlation: &map,
                pose_flow: &bad,
                prev_flow: None,
                iteration: 1
            })
            .is_err());
    }

    #[test]
    fn debiased_identical_images_give_zero_residual() {
        use crate::correlation::{build_correlation, extract_features, lookup_standard};
        use crate::imaging::ColorImage;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ColorImage::from_fn(32, 24, |x, y| {
            let v = ((x / 3 + y / 5) % 4) as f32 * 0.2 + rng.gen_range(0.0..0.1);
            [v, 1.0 - v, 0.5 * v]
        });
        let f = extract_features(&img, 4).unwrap();
        let pyr = build_correlation(&f, &f, 2).unwrap();
        let zero = FlowField::constant(f.width, f.height, Vector2::zeros());
        let map = lookup_standard(&pyr, &zero, 3).unwrap();
        let input = PredictorInput {
            correlation: &map,
            pose_flow: &zero,
            prev_flow: None,
            iteration: 1,
        };
        let plain = SoftArgmaxPredictor::default().predict(&input).unwrap();
        assert!(plain.flow.disp.iter().any(|d| d.norm() > 1e-3));
        let p = DebiasedPredictor::new(SoftArgmaxPredictor::default(), &f);
        let out = p.predict(&input).unwrap();
        assert!(out.flow.disp.iter().all(|d| d.norm() < 1e-12));
        assert_eq!(out.confidence, plain.confidence);
        let short = DebiasedPredictor {
            bias: vec![Vector2::zeros(); 3],
            ..p
        };
        assert!(short.predict(&input).is_err());
    }

    #[test]
    fn upsample_constant_and_zero() {
        let up = upsample_flow(&FlowField::constant(4, 3, Vector2::new(1.0, 0.0)), 4);
        assert_eq!((up.width, up.height), (16, 12));
        assert!(up.disp.iter().all(|d| (d - Vector2::new(4.0, 0.0)).norm() < 1e-12));
        assert!(up.valid.iter().all(|&v| v));
        let z = upsample_flow(&FlowField::constant(4, 3, Vector2::zeros()), 4);
        assert!(z.disp.iter().all(|d| d.norm() == 0.0));
    }

    #[test]
    fn upsample_linear_ramp_is_exact() {
        let (gw, gh, f) = (8usize, 6usize, 4usize);
        let mut g = FlowField::invalid(gw, gh);
        for y in 0..gh {
            for x in 0..gw {
                g.set(x, y, Some(Vector2::new(0.3 * x as f64 - 1.0, 0.2 * y as f64)));
            }
        }
        let up = upsample_flow(&g, f);
        for y in f..(gh - 1) * f {
            for x in f..(gw - 1) * f {
                let gx = (x as f64 + 0.5) / f as f64 - 0.5;
                let gy = (y as f64 + 0.5) / f as f64 - 0.5;
                let want = Vector2::new(0.3 * gx - 1.0, 0.2 * gy) * f as f64;
                assert!((up.get(x, y).unwrap() - want).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_validity_is_nearest() {
        let mut g = FlowField::invalid(2, 2);
        g.set(0, 0, Some(Vector2::new(1.0, 1.0)));
        let up = upsample_flow(&g, 4);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(up.valid[y * 8 + x], x < 4 && y < 4);
            }
        }
        assert_eq!(up.get(3, 3), Some(Vector2::new(4.0, 4.0)));
        assert_eq!(upsample_scalar(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2)[2], 2.0);
    }
}
