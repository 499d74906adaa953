//! Pose from 3D-to-2D correspondences.
//!
//! [`solve_gauss_newton`] is a Huber-robust Gauss-Newton / Levenberg solve on
//! SE(3) with rotation increments about the object center. [`epnp`] is the
//! non-iterative EPnP solver and [`solve_epnp_ransac`] wraps it in a seeded
//! RANSAC loop with a final Gauss-Newton polish on the inliers.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{exp_so3, CameraIntrinsics, RigidPose, Rotation6D, MIN_DEPTH};
use crate::render::RenderBuffers;

pub const MIN_CORRESPONDENCES: usize = 6;
pub const DEFAULT_HUBER_DELTA: f64 = 2.0;
pub const DEFAULT_GN_ITERS: usize = 10;
pub const DEFAULT_RANSAC_THRESHOLD: f64 = 3.0;
pub const DEFAULT_RANSAC_CONFIDENCE: f64 = 0.999;
const MAX_CONDITION: f64 = 1e12;
const MAX_REFITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence3D2D {
    /// Model-frame point, meters.
    pub point: Vector3<f64>,
    /// Observed pixel.
    pub pixel: Vector2<f64>,
    pub weight: f64,
}

impl Correspondence3D2D {
    pub fn new(point: Vector3<f64>, pixel: Vector2<f64>) -> Self {
        Self {
            point,
            pixel,
            weight: 1.0,
        }
    }
}

/// One correspondence per mask pixel where `flow` is valid:
/// `(coords(u0), u0 + flow(u0), confidence(u0))` with `u0` the pixel center.
pub fn lift_flow(buffers0: &RenderBuffers, flow: &FlowField, confidence: Option<&[f32]>) -> Vec<Correspondence3D2D> {
    let w = buffers0.width;
    let mut out = Vec::with_capacity(buffers0.mask.iter().filter(|&&m| m).count());
    for i in 0..w * buffers0.height {
        if !(buffers0.mask[i] && flow.valid[i]) {
            continue;
        }
        let weight = confidence.map_or(1.0, |c| c[i] as f64);
        if !(weight.is_finite() && weight >= 0.0) {
            continue;
        }
        let u0 = Vector2::new((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        out.push(Correspondence3D2D {
            point: buffers0.coords[i],
            pixel: u0 + flow.disp[i],
            weight,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussNewtonOptions {
    pub max_iters: usize,
    pub huber_delta_px: f64,
    pub step_tolerance: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_GN_ITERS,
            huber_delta_px: DEFAULT_HUBER_DELTA,
            step_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonReport {
    pub pose: RigidPose,
    /// Robust cost at the start and after every accepted step.
    pub costs: Vec<f64>,
    /// Norm of the very first (undamped) increment.
    pub first_step_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Huber penalty of a residual with squared norm `e2`.
#[inline]
fn huber(e2: f64, delta: f64) -> f64 {
    if e2 <= delta * delta {
        0.5 * e2
    } else {
        delta * (e2.sqrt() - 0.5 * delta)
    }
}

// Penalty for a point that falls behind the camera; constant so it never
// contributes a gradient.
const BEHIND_CAMERA_PX: f64 = 1e4;

fn robust_cost(corrs: &[Correspondence3D2D], pose: &RigidPose, k: &CameraIntrinsics, delta: f64) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let e2 = pose
                .project(&c.point, k)
                .map_or(BEHIND_CAMERA_PX * BEHIND_CAMERA_PX, |q| {
                    (q.pixel - c.pixel).norm_squared()
                });
            c.weight * huber(e2, delta)
        })
        .sum()
}

/// Pose split into rotation and the camera-frame position of `center`.
struct CenteredPose {
    rotation: Matrix3<f64>,
    center_cam: Vector3<f64>,
}

impl CenteredPose {
    fn from_pose(pose: &RigidPose, center: &Vector3<f64>) -> Self {
        Self {
            rotation: pose.rotation,
            center_cam: pose.transform(center),
        }
    }

    fn to_pose(&self, center: &Vector3<f64>) -> RigidPose {
        RigidPose {
            rotation: self.rotation,
            translation: self.center_cam - self.rotation * center,
        }
    }

    fn apply(&self, step: &Vector6<f64>) -> Self {
        let w = Vector3::new(step[0], step[1], step[2]);
        let r = exp_so3(&w) * self.rotation;
        let rotation = Rotation6D::encode(&r).decode().unwrap_or(r);
        Self {
            rotation,
            center_cam: self.center_cam + Vector3::new(step[3], step[4], step[5]),
        }
    }
}

fn normal_equations(
    corrs: &[Correspondence3D2D],
    pose: &CenteredPose,
    center: &Vector3<f64>,
    k: &CameraIntrinsics,
    delta: f64,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut acc = [[0.0f64; 6]; 6];
    for c in corrs {
        if c.weight <= 0.0 {
            continue;
        }
        let arm = pose.rotation * (c.point - center);
        let x = arm + pose.center_cam;
        if x.z <= MIN_DEPTH {
            continue;
        }
        let iz = 1.0 / x.z;
        let u = Vector2::new(k.fx * x.x * iz + k.cx, k.fy * x.y * iz + k.cy);
        let r = u - c.pixel;
        let e2 = r.norm_squared();
        let irls = if e2 <= delta * delta { 1.0 } else { delta / e2.sqrt() };
        let wgt = c.weight * irls;
        // Rows of d(pixel)/d(camera point); with d(camera point)/d(ω, τ) =
        // [-[arm]×, I] each Jacobian row is [arm × d, d].
        let d0 = Vector3::new(k.fx * iz, 0.0, -k.fx * x.x * iz * iz);
        let d1 = Vector3::new(0.0, k.fy * iz, -k.fy * x.y * iz * iz);
        let (a0, a1) = (arm.cross(&d0), arm.cross(&d1));
        let j0 = [a0.x, a0.y, a0.z, d0.x, d0.y, d0.z];
        let j1 = [a1.x, a1.y, a1.z, d1.x, d1.y, d1.z];
        let (r0, r1) = (r.x * wgt, r.y * wgt);
        for p in 0..6 {
            let (w0, w1) = (j0[p] * wgt, j1[p] * wgt);
            for q in p..6 {
                acc[p][q] += w0 * j0[q] + w1 * j1[q];
            }
            g[p] += j0[p] * r0 + j1[p] * r1;
        }
    }
    for p in 0..6 {
        for q in p..6 {
            h[(p, q)] = acc[p][q];
            h[(q, p)] = acc[p][q];
        }
    }
    (h, g)
}

fn check_inputs(corrs: &[Correspondence3D2D]) -> Result<()> {
    if corrs.len() < MIN_CORRESPONDENCES {
        return Err(Error::Underdetermined(corrs.len()));
    }
    let total: f64 = corrs.iter().map(|c| c.weight).sum();
    if !(total > 0.0) {
        return Err(Error::Underdetermined(0));
    }
    Ok(())
}

/// Minimizes `Σ wᵢ·huber(‖π(P·pᵢ) − uᵢ‖)` starting from `init`.
pub fn solve_gauss_newton(
    corrs: &[Correspondence3D2D],
    init: &RigidPose,
    k: &CameraIntrinsics,
    opts: &GaussNewtonOptions,
) -> Result<GaussNewtonReport> {
    check_inputs(corrs)?;
    let delta = opts.huber_delta_px;
    let center = corrs.iter().map(|c| c.point).sum::<Vector3<f64>>() / corrs.len() as f64;
    let mut state = CenteredPose::from_pose(init, &center);
    let mut cost = robust_cost(corrs, init, k, delta);
    let mut costs = vec![cost];
    let mut first_step_norm = f64::NAN;
    let mut lambda = 0.0f64;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.max_iters {
        iterations += 1;
        let (h, g) = normal_equations(corrs, &state, &center, k, delta);
        let eig = SymmetricEigen::new(h).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) || hi / lo > MAX_CONDITION {
            return Err(Error::DegenerateGeometry);
        }
        let mut accepted = false;
        for _attempt in 0..12 {
            let mut a = h;
            for d in 0..6 {
                a[(d, d)] += lambda * h[(d, d)];
            }
            let Some(step) = a.cholesky().map(|c| -c.solve(&g)) else {
                lambda = (lambda * 10.0).max(1e-4);
                continue;
            };
            let step_norm = step.norm();
            if first_step_norm.is_nan() {
                first_step_norm = step_norm;
            }
            if step_norm < opts.step_tolerance {
                converged = true;
                accepted = true;
                break;
            }
            let candidate = state.apply(&step);
            let new_cost = robust_cost(corrs, &candidate.to_pose(&center), k, delta);
            if new_cost <= cost {
                state = candidate;
                cost = new_cost;
                costs.push(cost);
                lambda = if lambda < 1e-6 { 0.0 } else { lambda * 0.1 };
                accepted = true;
                if step_norm < opts.step_tolerance * 10.0 {
                    converged = true;
                }
                break;
            }
            lambda = (lambda * 10.0).max(1e-4);
        }
        if converged || !accepted {
            converged |= !accepted;
            break;
        }
    }
    Ok(GaussNewtonReport {
        pose: state.to_pose(&center),
        costs,
        first_step_norm,
        iterations,
        converged,
    })
}

/// Principal axes of a point set, eigenvalues descending.
fn principal_axes(points: &[Vector3<f64>]) -> (Vector3<f64>, [f64; 3], [Vector3<f64>; 3]) {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points
        .iter()
        .map(|p| (p - c) * (p - c).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i].max(0.0));
    let vecs = order.map(|i| eig.eigenvectors.column(i).into_owned());
    (c, vals, vecs)
}

const PLANAR_RATIO: f64 = 1e-6;

fn is_collinear(vals: &[f64; 3]) -> bool {
    !(vals[0] > 0.0) || vals[1] / vals[0] < PLANAR_RATIO
}

/// Least-squares rigid alignment `dst ≈ R·src + t` (Kabsch).
pub fn procrustes(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidPose {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let cov = src
        .iter()
        .zip(dst)
        .map(|(s, d)| (d - cd) * (s - cs).transpose())
        .sum::<Matrix3<f64>>();
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    RigidPose {
        rotation,
        translation: cd - rotation * cs,
    }
}

fn mean_reprojection_error(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> f64 {
    points
        .iter()
        .zip(pixels)
        .map(|(p, u)| pose.project(p, k).map_or(BEHIND_CAMERA_PX, |q| (q.pixel - u).norm()))
        .sum::<f64>()
        / points.len() as f64
}

/// EPnP on the given correspondences (weights ignored).
///
/// Control points come from the PCA of the 3D set; planar sets use three
/// control points. Kernel dimensions 1..3 (1..2 when planar) are tried and
/// the pose with the lowest reprojection error wins.
pub fn epnp(corrs: &[Correspondence3D2D], k: &CameraIntrinsics) -> Result<RigidPose> {
    if corrs.len() < 4 {
        return Err(Error::Underdetermined(corrs.len()));
    }
    let points: Vec<Vector3<f64>> = corrs.iter().map(|c| c.point).collect();
    let pixels: Vec<Vector2<f64>> = corrs.iter().map(|c| c.pixel).collect();
    let (c0, vals, axes) = principal_axes(&points);
    if is_collinear(&vals) {
        return Err(Error::DegenerateGeometry);
    }
    let planar = vals[2] / vals[0] < PLANAR_RATIO;
    let nc = if planar { 3 } else { 4 };
    let mut ctrl = vec![c0];
    for j in 0..nc - 1 {
        ctrl.push(c0 + axes[j] * vals[j].sqrt());
    }

    // barycentric coordinates w.r.t. the control points
    let alphas: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            let d = p - c0;
            let mut a = vec![0.0; nc];
            let mut s = 0.0;
            for j in 0..nc - 1 {
                a[j + 1] = axes[j].dot(&d) / vals[j].sqrt();
                s += a[j + 1];
            }
            a[0] = 1.0 - s;
            a
        })
        .collect();

    let dim = 3 * nc;
    let mut mtm = DMatrix::<f64>::zeros(dim, dim);
    let mut row_u = DVector::<f64>::zeros(dim);
    let mut row_v = DVector::<f64>::zeros(dim);
    for (a, u) in alphas.iter().zip(&pixels) {
        for j in 0..nc {
            row_u[3 * j] = a[j] * k.fx;
            row_u[3 * j + 1] = 0.0;
            row_u[3 * j + 2] = a[j] * (k.cx - u.x);
            row_v[3 * j] = 0.0;
            row_v[3 * j + 1] = a[j] * k.fy;
            row_v[3 * j + 2] = a[j] * (k.cy - u.y);
        }
        mtm += &row_u * row_u.transpose() + &row_v * row_v.transpose();
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernel: Vec<DVector<f64>> = order
        .iter()
        .take(4)
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();

    let pairs: Vec<(usize, usize)> = (0..nc).flat_map(|a| (a + 1..nc).map(move |b| (a, b))).collect();
    let rho: Vec<f64> = pairs.iter().map(|&(a, b)| (ctrl[a] - ctrl[b]).norm_squared()).collect();
    let diff = |v: &DVector<f64>, a: usize, b: usize| {
        Vector3::new(
            v[3 * a] - v[3 * b],
            v[3 * a + 1] - v[3 * b + 1],
            v[3 * a + 2] - v[3 * b + 2],
        )
    };

    let max_n = if planar { 2 } else { 3 };
    let mut best: Option<(f64, RigidPose)> = None;
    for n in 1..=max_n {
        let deltas: Vec<Vec<Vector3<f64>>> = pairs
            .iter()
            .map(|&(a, b)| (0..n).map(|kk| diff(&kernel[kk], a, b)).collect())
            .collect();
        let Some(mut betas) = linearized_betas(&deltas, &rho, n) else {
            continue;
        };
        refine_betas(&deltas, &rho, &mut betas);

        let mut ctrl_cam: Vec<Vector3<f64>> = (0..nc)
            .map(|j| {
                (0..n).fold(Vector3::zeros(), |acc, kk| {
                    acc + Vector3::new(kernel[kk][3 * j], kernel[kk][3 * j + 1], kernel[kk][3 * j + 2]) * betas[kk]
                })
            })
            .collect();
        let mut cam: Vec<Vector3<f64>> = alphas
            .iter()
            .map(|a| (0..nc).fold(Vector3::zeros(), |acc, j| acc + ctrl_cam[j] * a[j]))
            .collect();
        if cam.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            ctrl_cam.iter_mut().for_each(|c| *c = -*c);
            cam.iter_mut().for_each(|c| *c = -*c);
        }
        let pose = procrustes(&points, &cam);
        let err = mean_reprojection_error(&points, &pixels, &pose, k);
        if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p).ok_or(Error::DegenerateGeometry)
}

/// Solves for the products `βa·βb` linearly and extracts the betas.
fn linearized_betas(deltas: &[Vec<Vector3<f64>>], rho: &[f64], n: usize) -> Option<Vec<f64>> {
    let prods: Vec<(usize, usize)> = (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
    if prods.len() > rho.len() {
        return None;
    }
    let l = DMatrix::from_fn(rho.len(), prods.len(), |r, c| {
        let (a, b) = prods[c];
        let d = &deltas[r];
        if a == b {
            d[a].norm_squared()
        } else {
            2.0 * d[a].dot(&d[b])
        }
    });
    let rhs = DVector::from_column_slice(rho);
    let x = l.svd(true, true).solve(&rhs, 1e-14).ok()?;
    let sign = if x[0] < 0.0 { -1.0 } else { 1.0 };
    let x = x * sign;
    let mut betas = vec![0.0; n];
    betas[0] = x[0].abs().sqrt();
    for (c, &(a, b)) in prods.iter().enumerate() {
        if a == 0 && b > 0 {
            let bb = prods.iter().position(|&p| p == (b, b)).unwrap();
            betas[b] = x[bb].abs().sqrt() * if x[c] < 0.0 { -1.0 } else { 1.0 };
        }
    }
    betas.iter().all(|b| b.is_finite()).then_some(betas)
}

/// Gauss-Newton on `Σ (‖Σ βk Δk‖² − ρ)²` over the betas.
fn refine_betas(deltas: &[Vec<Vector3<f64>>], rho: &[f64], betas: &mut [f64]) {
    let n = betas.len();
    for _ in 0..5 {
        let mut j = DMatrix::<f64>::zeros(rho.len(), n);
        let mut r = DVector::<f64>::zeros(rho.len());
        for (row, (d, &target)) in deltas.iter().zip(rho).enumerate() {
            let v = (0..n).fold(Vector3::zeros(), |acc, kk| acc + d[kk] * betas[kk]);
            r[row] = v.norm_squared() - target;
            for kk in 0..n {
                j[(row, kk)] = 2.0 * v.dot(&d[kk]);
            }
        }
        let Ok(step) = j.svd(true, true).solve(&r, 1e-14) else {
            return;
        };
        for kk in 0..n {
            betas[kk] -= step[kk];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacOptions {
    pub threshold_px: f64,
    pub max_rounds: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacOptions {
    fn default() -> Self {
        Self {
            threshold_px: DEFAULT_RANSAC_THRESHOLD,
            max_rounds: 500,
            confidence: DEFAULT_RANSAC_CONFIDENCE,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: RigidPose,
    pub inliers: Vec<bool>,
    pub rounds: usize,
}

fn inlier_mask(corrs: &[Correspondence3D2D], pose: &RigidPose, k: &CameraIntrinsics, thr: f64) -> (Vec<bool>, f64) {
    let mut err_sum = 0.0;
    let mask = corrs
        .iter()
        .map(|c| {
            let e = pose
                .project(&c.point, k)
                .map_or(f64::INFINITY, |q| (q.pixel - c.pixel).norm());
            let inl = e < thr;
            if inl {
                err_sum += e;
            }
            inl
        })
        .collect();
    (mask, err_sum)
}

/// EPnP hypotheses on random 6-point samples, scored by inlier count; the
/// winner is re-estimated on all its inliers with Gauss-Newton.
pub fn solve_epnp_ransac(
    corrs: &[Correspondence3D2D],
    k: &CameraIntrinsics,
    opts: &RansacOptions,
) -> Result<RansacResult> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(Error::Underdetermined(n));
    }
    let points: Vec<Vector3<f64>> = corrs.iter().map(|c| c.point).collect();
    if is_collinear(&principal_axes(&points).1) {
        return Err(Error::DegenerateGeometry);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(usize, f64, RigidPose)> = None;
    let mut needed = opts.max_rounds;
    let mut rounds = 0;
    let mut sample = Vec::with_capacity(MIN_CORRESPONDENCES);
    while rounds < needed.min(opts.max_rounds) {
        rounds += 1;
        sample.clear();
        sample.extend(
            rand::seq::index::sample(&mut rng, n, MIN_CORRESPONDENCES)
                .iter()
                .map(|i| corrs[i]),
        );
        let Ok(pose) = epnp(&sample, k) else { continue };
        let (mask, err) = inlier_mask(corrs, &pose, k, opts.threshold_px);
        let count = mask.iter().filter(|&&m| m).count();
        let better = match &best {
            None => true,
            Some((bc, be, _)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((count, err, pose));
            let w = count as f64 / n as f64;
            let p_good = w.powi(MIN_CORRESPONDENCES as i32);
            if p_good >= 1.0 {
                needed = rounds;
            } else if p_good > 0.0 {
                let req = ((1.0 - opts.confidence).ln() / (1.0 - p_good).ln()).ceil();
                needed = if req.is_finite() { req as usize } else { opts.max_rounds };
            }
        }
    }
    let Some((count, _, pose)) = best else {
        return Err(Error::RansacFailure);
    };
    if count < MIN_CORRESPONDENCES {
        return Err(Error::RansacFailure);
    }
    // Alternate inlier selection and re-estimation until the set settles.
    let mut refined = pose;
    let (mut inliers, _) = inlier_mask(corrs, &refined, k, opts.threshold_px);
    for _ in 0..MAX_REFITS {
        let inl: Vec<Correspondence3D2D> = corrs
            .iter()
            .zip(&inliers)
            .filter(|(_, &m)| m)
            .map(|(c, _)| *c)
            .collect();
        if inl.len() < MIN_CORRESPONDENCES {
            break;
        }
        let Ok(rep) = solve_gauss_newton(&inl, &refined, k, &GaussNewtonOptions::default()) else {
            break;
        };
        refined = rep.pose;
        let (next, _) = inlier_mask(corrs, &refined, k, opts.threshold_px);
        if next == inliers {
            break;
        }
        inliers = next;
    }
    Ok(RansacResult {
        pose: refined,
        inliers,
        rounds,
    })
}
