//! The recurrent refinement loop.
//!
//! The object is rendered once at `P0`. Every iteration computes the
//! pose-induced flow of the current estimate, samples the correlation pyramid
//! around it, predicts an intermediate flow, lifts it to correspondences on
//! the `P0` render and solves for the next pose.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::{
    build_correlation, extract_features, lookup_shape_constraint, lookup_standard, CorrelationPyramid, FeatureGrid,
    LookupMode, DEFAULT_DOWNSAMPLE, DEFAULT_LEVELS, DEFAULT_RADIUS,
};
use crate::error::{Error, Result};
use crate::flow::{flow_error, flow_to_color, gt_flow, pose_induced_flow, warp, FlowField};
use crate::geometry::{pose_errors, CameraIntrinsics, RigidPose};
use crate::imaging::ColorImage;
use crate::mesh::TriangleMesh;
use crate::predictor::{
    upsample_flow, upsample_scalar, DebiasedPredictor, FlowPredictor, PredictorInput, SoftArgmaxPredictor,
    DEFAULT_TEMPERATURE,
};
use crate::render::{rasterize, RenderBuffers};
use crate::solver::{lift_flow, solve_epnp_ransac, solve_gauss_newton, GaussNewtonOptions, RansacOptions};

pub const DEFAULT_ITERATIONS: usize = 8;
pub const DEFAULT_GAMMA: f64 = 0.8;
pub const DEFAULT_ALPHA: f64 = 0.1;
/// Surface points used by the pose term of the diagnostic loss.
pub const LOSS_SURFACE_POINTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    GaussNewton,
    EpnpRansac,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub iterations: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub radius: usize,
    pub levels: usize,
    pub temperature: f64,
    pub solver: SolverMode,
    pub lookup: LookupMode,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            gamma: DEFAULT_GAMMA,
            alpha: DEFAULT_ALPHA,
            radius: DEFAULT_RADIUS,
            levels: DEFAULT_LEVELS,
            temperature: DEFAULT_TEMPERATURE,
            solver: SolverMode::GaussNewton,
            lookup: LookupMode::ShapeConstraint,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if self.radius < 1 {
            return bad("radius must be at least 1".into());
        }
        if self.levels < 1 {
            return bad("levels must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }
}

/// Optional ground truth for per-iteration diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub pose: &'a RigidPose,
    /// Depth of the observed scene, for occlusion-aware gt flow.
    pub depth: Option<&'a [f64]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub pose: RigidPose,
    /// Intermediate flow at crop resolution.
    pub flow: FlowField,
    /// Pose-induced flow (P0 → previous pose) that indexed the lookup.
    pub pose_flow: FlowField,
    pub mean_confidence: f64,
    pub max_confidence: f64,
    pub correspondences: usize,
    pub flow_l1: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace {
    pub initial_pose: RigidPose,
    pub intrinsics: CameraIntrinsics,
    pub iterations: Vec<IterationRecord>,
    /// Set when a solver failure truncated the trace.
    pub failure: Option<String>,
}

impl RefinementTrace {
    /// Last solved pose, or `P0` when no iteration succeeded.
    pub fn final_pose(&self) -> RigidPose {
        self.iterations.last().map_or(self.initial_pose, |r| r.pose)
    }

    /// Pose after `k` iterations (k = 0 is `P0`); clamps to the last entry.
    pub fn pose_at(&self, k: usize) -> RigidPose {
        match k.min(self.iterations.len()) {
            0 => self.initial_pose,
            k => self.iterations[k - 1].pose,
        }
    }

    /// Writes `poses.json`, per-iteration `.flo` files and PNG visualizations,
    /// and `diagnostics.csv`. With `target`, each iteration also gets a
    /// backward warp of the observation by the intermediate flow.
    pub fn save(&self, dir: &Path, target: Option<&ColorImage>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        #[derive(Serialize)]
        struct PoseEntry<'a> {
            iteration: usize,
            #[serde(flatten)]
            pose: &'a RigidPose,
        }
        #[derive(Serialize)]
        struct Poses<'a> {
            intrinsics: &'a CameraIntrinsics,
            poses: Vec<PoseEntry<'a>>,
            failure: &'a Option<String>,
        }
        let mut poses = vec![PoseEntry {
            iteration: 0,
            pose: &self.initial_pose,
        }];
        poses.extend(self.iterations.iter().enumerate().map(|(i, r)| PoseEntry {
            iteration: i + 1,
            pose: &r.pose,
        }));
        let path = dir.join("poses.json");
        let json = serde_json::to_string_pretty(&Poses {
            intrinsics: &self.intrinsics,
            poses,
            failure: &self.failure,
        })?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

        let mut csv = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
        csv.write_record([
            "iteration",
            "correspondences",
            "mean_confidence",
            "max_confidence",
            "flow_l1",
            "rotation_error_deg",
            "translation_error_m",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.9}"));
        for (i, r) in self.iterations.iter().enumerate() {
            let k = i + 1;
            csv.write_record([
                k.to_string(),
                r.correspondences.to_string(),
                format!("{:.6}", r.mean_confidence),
                format!("{:.6}", r.max_confidence),
                opt(r.flow_l1),
                opt(r.rotation_error_deg),
                opt(r.translation_error),
            ])?;
            r.flow.write_flo(dir.join(format!("flow_{k:02}.flo")))?;
            r.pose_flow.write_flo(dir.join(format!("pose_flow_{k:02}.flo")))?;
            flow_to_color(&r.flow, None).save_png(dir.join(format!("flow_{k:02}.png")))?;
            if let Some(t) = target {
                warp(t, &r.flow)?.save_png(dir.join(format!("warp_{k:02}.png")))?;
            }
        }
        csv.flush().map_err(|e| Error::io(dir.join("diagnostics.csv"), e))?;
        Ok(())
    }
}

/// The `P0` render, its feature correlation with the observation, and the
/// predictor; everything that stays fixed across iterations.
pub struct RefinementSetup {
    pub buffers0: RenderBuffers,
    /// Features of the `P0` render.
    pub features0: FeatureGrid,
    pub pyramid: CorrelationPyramid,
    pub p0: RigidPose,
    pub intrinsics: CameraIntrinsics,
}

impl RefinementSetup {
    pub fn new(
        target: &ColorImage,
        mesh: &TriangleMesh,
        p0: &RigidPose,
        k: &CameraIntrinsics,
        config: &RefinerConfig,
    ) -> Result<Self> {
        config.validate()?;
        if target.width != k.width as usize || target.height != k.height as usize {
            return Err(Error::DimensionMismatch(format!(
                "target image {}x{} vs intrinsics {}x{}",
                target.width, target.height, k.width, k.height
            )));
        }
        let buffers0 = rasterize(mesh, p0, k);
        if buffers0.mask_count() == 0 {
            return Err(Error::ObjectOutOfView);
        }
        let f1 = extract_features(&buffers0.color, DEFAULT_DOWNSAMPLE)?;
        let f2 = extract_features(target, DEFAULT_DOWNSAMPLE)?;
        let pyramid = build_correlation(&f1, &f2, config.levels)?;
        Ok(Self {
            buffers0,
            features0: f1,
            pyramid,
            p0: *p0,
            intrinsics: *k,
        })
    }
}

pub fn refine(
    target: &ColorImage,
    mesh: &TriangleMesh,
    p0: &RigidPose,
    k: &CameraIntrinsics,
    config: &RefinerConfig,
) -> Result<RefinementTrace> {
    refine_with_reference(target, mesh, p0, k, config, None)
}

pub fn refine_with_reference(
    target: &ColorImage,
    mesh: &TriangleMesh,
    p0: &RigidPose,
    k: &CameraIntrinsics,
    config: &RefinerConfig,
    reference: Option<Reference<'_>>,
) -> Result<RefinementTrace> {
    let setup = RefinementSetup::new(target, mesh, p0, k, config)?;
    let predictor = DebiasedPredictor::new(SoftArgmaxPredictor::new(config.temperature)?, &setup.features0);
    Ok(run_iterations(&setup, &predictor, config, reference))
}

/// Runs the loop on a prepared setup with any predictor.
pub fn run_iterations(
    setup: &RefinementSetup,
    predictor: &dyn FlowPredictor,
    config: &RefinerConfig,
    reference: Option<Reference<'_>>,
) -> RefinementTrace {
    let k = &setup.intrinsics;
    let buffers0 = &setup.buffers0;
    let ds = DEFAULT_DOWNSAMPLE;
    let gt = reference.map(|r| gt_flow(buffers0, &setup.p0, r.pose, k, r.depth));
    let mut trace = RefinementTrace {
        initial_pose: setup.p0,
        intrinsics: *k,
        iterations: Vec::with_capacity(config.iterations),
        failure: None,
    };
    let mut pose = setup.p0;
    let mut prev_grid: Option<FlowField> = None;

    for it in 1..=config.iterations {
        let mut step = || -> Result<IterationRecord> {
            let pose_flow = pose_induced_flow(buffers0, &setup.p0, &pose, k);
            let pose_grid = pose_flow.downsample(ds);
            let corr = match config.lookup {
                LookupMode::ShapeConstraint => lookup_shape_constraint(&setup.pyramid, &pose_grid, config.radius)?,
                LookupMode::Standard => {
                    let zero = FlowField::constant(pose_grid.width, pose_grid.height, Default::default());
                    lookup_standard(&setup.pyramid, prev_grid.as_ref().unwrap_or(&zero), config.radius)?
                }
            };
            let pred = predictor.predict(&PredictorInput {
                correlation: &corr,
                pose_flow: &pose_grid,
                prev_flow: prev_grid.as_ref(),
                iteration: it,
            })?;
            let mut flow = upsample_flow(&pred.flow, ds);
            for (v, &m) in flow.valid.iter_mut().zip(&buffers0.mask) {
                *v &= m;
            }
            let conf = upsample_scalar(&pred.confidence, pred.flow.width, pred.flow.height, ds);
            let corrs = lift_flow(buffers0, &flow, Some(&conf));
            let next = match config.solver {
                SolverMode::GaussNewton => solve_gauss_newton(&corrs, &pose, k, &GaussNewtonOptions::default())?.pose,
                SolverMode::EpnpRansac => {
                    let opts = RansacOptions {
                        seed: iteration_seed(config.seed, it),
                        ..Default::default()
                    };
                    solve_epnp_ransac(&corrs, k, &opts)?.pose
                }
            };
            let valid_conf: Vec<f32> = pred
                .confidence
                .iter()
                .zip(&pred.flow.valid)
                .filter(|(_, &v)| v)
                .map(|(&c, _)| c)
                .collect();
            let mean_confidence = if valid_conf.is_empty() {
                0.0
            } else {
                valid_conf.iter().map(|&c| c as f64).sum::<f64>() / valid_conf.len() as f64
            };
            let max_confidence = valid_conf.iter().copied().fold(0.0f32, f32::max) as f64;
            let flow_l1 = match &gt {
                Some(g) => Some(flow_error(&flow, g)?.l1),
                None => None,
            };
            let errs = reference.map(|r| pose_errors(&next, r.pose));
            prev_grid = Some(pred.flow);
            Ok(IterationRecord {
                pose: next,
                flow,
                pose_flow,
                mean_confidence,
                max_confidence,
                correspondences: corrs.len(),
                flow_l1,
                rotation_error_deg: errs.map(|e| e.0),
                translation_error: errs.map(|e| e.1),
            })
        };
        match step() {
            Ok(rec) => {
                pose = rec.pose;
                trace.iterations.push(rec);
            }
            Err(e) => {
                log::debug!("refinement stopped at iteration {it}: {e}");
                trace.failure = Some(format!("iteration {it}: {e}"));
                break;
            }
        }
    }
    trace
}

/// Per-iteration RANSAC seed derived from the run seed.
pub fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(iteration as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticLoss {
    pub total: f64,
    pub pose: Vec<f64>,
    pub flow: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Weights `γ^(N−k)` for k = 1..N.
pub fn loss_weights(n: usize, gamma: f64) -> Vec<f64> {
    (1..=n).map(|k| gamma.powi((n - k) as i32)).collect()
}

/// `Σ_k γ^(N−k)·(L_pose^k + α·L_flow^k)` over the trace, with `L_pose` the
/// mean displacement of seeded surface samples and `L_flow` the masked L1
/// error of the intermediate flow against the gt flow.
pub fn diagnostic_loss(
    trace: &RefinementTrace,
    pgt: &RigidPose,
    mesh: &TriangleMesh,
    buffers0: &RenderBuffers,
    k: &CameraIntrinsics,
    config: &RefinerConfig,
) -> Result<DiagnosticLoss> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let samples = mesh.sample_surface(LOSS_SURFACE_POINTS, &mut rng);
    let gt = gt_flow(buffers0, &trace.initial_pose, pgt, k, None);
    let n = trace.iterations.len();
    let weights = loss_weights(n, config.gamma);
    let mut pose = Vec::with_capacity(n);
    let mut flow = Vec::with_capacity(n);
    for r in &trace.iterations {
        pose.push(surface_distance(&samples, &r.pose, pgt));
        flow.push(flow_error(&r.flow, &gt)?.l1);
    }
    let total = weights
        .iter()
        .zip(pose.iter().zip(&flow))
        .map(|(w, (lp, lf))| w * (lp + config.alpha * lf))
        .sum();
    Ok(DiagnosticLoss {
        total,
        pose,
        flow,
        weights,
    })
}

/// Mean displacement of `samples` between two poses (0 for no samples).
pub fn surface_distance(samples: &[Vector3<f64>], a: &RigidPose, b: &RigidPose) -> f64 {
    samples
        .iter()
        .map(|p| (a.transform(p) - b.transform(p)).norm())
        .sum::<f64>()
        / samples.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{prepare_trial, PerturbationRanges, ScenarioSpec, TrialSetup};
    use crate::mesh::BuiltinMesh;

    fn trial(perturbation: PerturbationRanges, index: usize) -> (TriangleMesh, TrialSetup) {
        let mesh = BuiltinMesh::CheckerCube.build();
        let spec = ScenarioSpec {
            perturbation,
            ..Default::default()
        };
        let t = prepare_trial(&spec, &mesh, index).unwrap();
        (mesh, t)
    }

    fn run(mesh: &TriangleMesh, t: &TrialSetup, cfg: &RefinerConfig) -> RefinementTrace {
        refine(&t.observation.image, mesh, &t.p0, &t.crop_intrinsics, cfg).unwrap()
    }

    #[test]
    fn starting_at_gt_stays_at_gt() {
        let (mesh, t) = trial(PerturbationRanges::ZERO, 0);
        let trace = run(&mesh, &t, &RefinerConfig::default());
        assert_eq!(trace.iterations.len(), DEFAULT_ITERATIONS);
        let (rot, trans) = pose_errors(&trace.final_pose(), &t.gt);
        assert!(rot < 0.5 && trans < 0.005 * mesh.diameter, "{rot} {trans}");
    }

    #[test]
    fn refinement_is_deterministic() {
        let (mesh, t) = trial(PerturbationRanges::default(), 1);
        let cfg = RefinerConfig {
            iterations: 3,
            ..Default::default()
        };
        assert_eq!(run(&mesh, &t, &cfg), run(&mesh, &t, &cfg));
    }

    #[test]
    fn recorded_pose_flow_matches_previous_pose() {
        let (mesh, t) = trial(PerturbationRanges::default(), 2);
        let cfg = RefinerConfig {
            iterations: 4,
            ..Default::default()
        };
        let trace = run(&mesh, &t, &cfg);
        let buffers0 = rasterize(&mesh, &t.p0, &t.crop_intrinsics);
        for (i, rec) in trace.iterations.iter().enumerate() {
            let want = pose_induced_flow(&buffers0, &t.p0, &trace.pose_at(i), &t.crop_intrinsics);
            assert_eq!(rec.pose_flow, want);
        }
        let first = &trace.iterations[0].pose_flow;
        assert!(first.disp.iter().all(|d| d.norm() == 0.0));
        assert_eq!(first.valid, buffers0.mask);
    }

    #[test]
    fn perturbed_start_improves() {
        let (mesh, t) = trial(PerturbationRanges::default(), 3);
        for solver in [SolverMode::GaussNewton, SolverMode::EpnpRansac] {
            let cfg = RefinerConfig {
                solver,
                seed: 11,
                ..Default::default()
            };
            let trace = run(&mesh, &t, &cfg);
            assert!(trace.failure.is_none());
            let before = crate::metrics::add_metric(&mesh, &t.gt, &t.p0).unwrap();
            let after = crate::metrics::add_metric(&mesh, &t.gt, &trace.final_pose()).unwrap();
            assert!(
                after < 0.5 * before && after < 0.1 * mesh.diameter,
                "{solver:?} {before} {after}"
            );
        }
    }

    #[test]
    fn object_out_of_view_is_an_error() {
        let (mesh, t) = trial(PerturbationRanges::ZERO, 0);
        let behind = RigidPose::from_translation(nalgebra::Vector3::new(0.0, 0.0, -1.0));
        let r = refine(
            &t.observation.image,
            &mesh,
            &behind,
            &t.crop_intrinsics,
            &RefinerConfig::default(),
        );
        assert!(matches!(r, Err(Error::ObjectOutOfView)));
    }

    #[test]
    fn config_validation_and_json() {
        assert!(RefinerConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RefinerConfig {
            gamma: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RefinerConfig {
            temperature: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let c: RefinerConfig = serde_json::from_str(r#"{"solver": "epnp_ransac", "lookup": "standard"}"#).unwrap();
        assert_eq!((c.solver, c.lookup), (SolverMode::EpnpRansac, LookupMode::Standard));
        assert!(serde_json::from_str::<RefinerConfig>(r#"{"iters": 3}"#).is_err());
    }

    #[test]
    fn loss_weights_by_hand() {
        assert_eq!(loss_weights(1, 0.8), vec![1.0]);
        let want = [0.2097152, 0.262144, 0.32768, 0.4096, 0.512, 0.64, 0.8, 1.0];
        for (w, h) in loss_weights(8, 0.8).iter().zip(want) {
            assert!((w - h).abs() < 1e-15, "{w} vs {h}");
        }
    }

    #[test]
    fn loss_of_a_perfect_trace_is_zero_and_sums_by_hand() {
        let (mesh, t) = trial(PerturbationRanges::default(), 4);
        let k = &t.crop_intrinsics;
        let cfg = RefinerConfig::default();
        let mut trace = run(&mesh, &t, &cfg);
        let buffers0 = rasterize(&mesh, &t.p0, k);
        let real = diagnostic_loss(&trace, &t.gt, &mesh, &buffers0, k, &cfg).unwrap();
        let mut by_hand = 0.0;
        for i in 0..8 {
            by_hand += 0.8f64.powi(7 - i as i32) * (real.pose[i] + 0.1 * real.flow[i]);
        }
        assert!((real.total - by_hand).abs() < 1e-12 * by_hand);
        assert!(real.total > 0.0);

        let gt = gt_flow(&buffers0, &t.p0, &t.gt, k, None);
        for r in &mut trace.iterations {
            r.pose = t.gt;
            r.flow = gt.clone();
        }
        let perfect = diagnostic_loss(&trace, &t.gt, &mesh, &buffers0, k, &cfg).unwrap();
        assert_eq!(perfect.total, 0.0);
    }
}
