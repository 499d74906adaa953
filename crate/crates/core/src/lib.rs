//! Shape-constrained recurrent matching for 6D object pose refinement.
//!
//! A mesh is rendered once at the initial pose. Each iteration indexes an
//! all-pairs feature correlation volume at the reprojection of the object's
//! own surface under the current pose estimate (the pose-induced flow),
//! predicts an intermediate flow from the sampled correlation windows, lifts
//! it to 3D-to-2D correspondences and solves for the next pose.
//!
//! Module map:
//! - [`geometry`]: intrinsics, poses, 6D rotation encoding, residual-pose composition
//! - [`mesh`], [`render`]: PLY meshes and the software rasterizer
//! - [`flow`]: pose-induced / ground-truth flow, warping, `.flo` I/O
//! - [`correlation`]: feature grids, correlation pyramid, both lookup strategies
//! - [`predictor`]: the intermediate-flow predictor interface and its soft-argmax implementation
//! - [`solver`]: Gauss-Newton and EPnP + RANSAC pose solvers
//! - [`refiner`]: the iterative loop, traces and the weighted diagnostic loss
//! - [`metrics`]: ADD / ADD-S and threshold checks
//! - [`harness`]: synthetic scenarios, benchmarks and ablations

pub mod correlation;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod harness;
pub mod imaging;
pub mod mesh;
pub mod metrics;
pub mod predictor;
pub mod refiner;
pub mod render;
pub mod solver;

pub use error::{Error, Result};
