//! C interface to `shapematch`.
//!
//! Objects cross the boundary as opaque handles (`SmMesh`, `SmTrace`) that
//! the caller releases with the matching `*_free`. Every fallible call
//! returns an [`SmStatus`]; the message of the last failure on the calling
//! thread is available from [`sm_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use shapematch::flow::pose_induced_flow;
use shapematch::geometry::{CameraIntrinsics, RigidPose};
use shapematch::imaging::ColorImage;
use shapematch::mesh::{load_mesh, TriangleMesh};
use shapematch::metrics::evaluate;
use shapematch::refiner::{refine, RefinementTrace, RefinerConfig};
use shapematch::render::rasterize;
use shapematch::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    SmOk = 0,
    SmErrNullPointer = 1,
    SmErrInvalidArgument = 2,
    SmErrInvalidConfig = 3,
    SmErrIo = 4,
    SmErrParse = 5,
    SmErrOutOfView = 6,
    SmErrSolver = 7,
    SmErrPanic = 8,
}

/// Row-major rotation and translation, model to camera.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmPose {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SmMetrics {
    pub add: f64,
    pub adds: f64,
    pub diameter: f64,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
    pub add_pass_01d: bool,
    pub add_pass_005d: bool,
}

/// Opaque mesh handle.
pub struct SmMesh(TriangleMesh);

/// Opaque refinement result.
pub struct SmTrace(RefinementTrace);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SmStatus {
    match e {
        Error::InvalidConfig(_) | Error::Json(_) => SmStatus::SmErrInvalidConfig,
        Error::Io { .. } => SmStatus::SmErrIo,
        Error::Parse { .. } | Error::InvalidFlowFile(_) | Error::Image(_) | Error::Csv(_) => SmStatus::SmErrParse,
        Error::ObjectOutOfView => SmStatus::SmErrOutOfView,
        Error::Underdetermined(_) | Error::DegenerateGeometry | Error::RansacFailure => SmStatus::SmErrSolver,
        _ => SmStatus::SmErrInvalidArgument,
    }
}

struct Fail(SmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SmStatus::SmErrNullPointer, format!("{what} is null"))
}

/// Runs `f`, recording failures and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmStatus::SmOk,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            SmStatus::SmErrPanic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SmStatus::SmErrInvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn to_pose(p: &SmPose) -> Result<RigidPose, Fail> {
    let r = &p.rotation;
    let m = nalgebra::Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
    let t = nalgebra::Vector3::from(p.translation);
    Ok(RigidPose::new(m, t)?)
}

fn from_pose(p: &RigidPose) -> SmPose {
    let r = &p.rotation;
    SmPose {
        rotation: [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ],
        translation: [p.translation.x, p.translation.y, p.translation.z],
    }
}

fn to_intrinsics(k: &SmIntrinsics) -> Result<CameraIntrinsics, Fail> {
    Ok(CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)?)
}

fn pixels(k: &CameraIntrinsics) -> usize {
    k.width as usize * k.height as usize
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a builtin mesh (`checker_cube`, `icosphere`, `tetra`) or an ASCII PLY file.
///
/// # Safety
/// `source` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_mesh_load(source: *const c_char, out: *mut *mut SmMesh) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let mesh = load_mesh(str_arg(source, "source")?)?;
        if mesh.is_empty() {
            return Err(Error::EmptyMesh.into());
        }
        *out = Box::into_raw(Box::new(SmMesh(mesh)));
        Ok(())
    })
}

/// # Safety
/// `mesh` must come from [`sm_mesh_load`] and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sm_mesh_free(mesh: *mut SmMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Mesh diameter in meters, or a negative value for NULL.
///
/// # Safety
/// `mesh` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_mesh_diameter(mesh: *const SmMesh) -> f64 {
    mesh.as_ref().map_or(-1.0, |m| m.0.diameter)
}

/// Renders `mesh` at `pose`. Each output buffer is optional (NULL skips it);
/// sizes are `3·w·h` floats for RGB, `w·h` bytes for the mask and `w·h`
/// doubles for depth (`+inf` off the object).
///
/// # Safety
/// Non-NULL buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sm_render(
    mesh: *const SmMesh,
    pose: *const SmPose,
    intrinsics: *const SmIntrinsics,
    rgb_out: *mut f32,
    mask_out: *mut u8,
    depth_out: *mut f64,
) -> SmStatus {
    guard(|| {
        let mesh = &ref_arg(mesh, "mesh")?.0;
        let pose = to_pose(ref_arg(pose, "pose")?)?;
        let k = to_intrinsics(ref_arg(intrinsics, "intrinsics")?)?;
        let n = pixels(&k);
        let buffers = rasterize(mesh, &pose, &k);
        if !rgb_out.is_null() {
            let rgb = out_slice(rgb_out, 3 * n, "rgb_out")?;
            for (dst, src) in rgb.chunks_exact_mut(3).zip(&buffers.color.data) {
                dst.copy_from_slice(src);
            }
        }
        if !mask_out.is_null() {
            let mask = out_slice(mask_out, n, "mask_out")?;
            for (dst, &m) in mask.iter_mut().zip(&buffers.mask) {
                *dst = m as u8;
            }
        }
        if !depth_out.is_null() {
            out_slice(depth_out, n, "depth_out")?.copy_from_slice(&buffers.depth);
        }
        Ok(())
    })
}

/// Pose-induced flow from `pose_a` to `pose_b` over the render at `pose_a`:
/// `2·w·h` floats (dx, dy interleaved) and `w·h` validity bytes.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sm_pose_flow(
    mesh: *const SmMesh,
    pose_a: *const SmPose,
    pose_b: *const SmPose,
    intrinsics: *const SmIntrinsics,
    flow_out: *mut f32,
    valid_out: *mut u8,
) -> SmStatus {
    guard(|| {
        let mesh = &ref_arg(mesh, "mesh")?.0;
        let a = to_pose(ref_arg(pose_a, "pose_a")?)?;
        let b = to_pose(ref_arg(pose_b, "pose_b")?)?;
        let k = to_intrinsics(ref_arg(intrinsics, "intrinsics")?)?;
        let n = pixels(&k);
        let flow_buf = out_slice(flow_out, 2 * n, "flow_out")?;
        let valid_buf = out_slice(valid_out, n, "valid_out")?;
        let buffers = rasterize(mesh, &a, &k);
        let flow = pose_induced_flow(&buffers, &a, &b, &k);
        for i in 0..n {
            let d = flow.disp[i];
            flow_buf[2 * i] = d.x as f32;
            flow_buf[2 * i + 1] = d.y as f32;
            valid_buf[i] = flow.valid[i] as u8;
        }
        Ok(())
    })
}

/// Refines `init` against an RGB image (`3·w·h` floats in [0, 1], row-major,
/// sized by `intrinsics`). `config_json` may be NULL for defaults.
///
/// # Safety
/// `rgb` must hold `3·w·h` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_refine(
    mesh: *const SmMesh,
    rgb: *const f32,
    intrinsics: *const SmIntrinsics,
    init: *const SmPose,
    config_json: *const c_char,
    out: *mut *mut SmTrace,
) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let mesh = &ref_arg(mesh, "mesh")?.0;
        let k = to_intrinsics(ref_arg(intrinsics, "intrinsics")?)?;
        let p0 = to_pose(ref_arg(init, "init")?)?;
        let config: RefinerConfig = if config_json.is_null() {
            RefinerConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?).map_err(Error::from)?
        };
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let (w, h) = (k.width as usize, k.height as usize);
        let data = std::slice::from_raw_parts(rgb, 3 * w * h);
        let image = ColorImage::from_fn(w, h, |x, y| {
            let i = 3 * (y * w + x);
            [data[i], data[i + 1], data[i + 2]]
        });
        let trace = refine(&image, mesh, &p0, &k, &config)?;
        *out = Box::into_raw(Box::new(SmTrace(trace)));
        Ok(())
    })
}

/// # Safety
/// `trace` must come from [`sm_refine`] and not be used afterwards. NULL is a no-op.
#[no_mangle]
pub unsafe extern "C" fn sm_trace_free(trace: *mut SmTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Completed iterations (fewer than configured if a solve failed).
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_trace_iterations(trace: *const SmTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.iterations.len())
}

/// Pose after `k` iterations; `k = 0` is the initial pose.
///
/// # Safety
/// `trace` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_trace_pose(trace: *const SmTrace, k: usize, out: *mut SmPose) -> SmStatus {
    guard(|| {
        let t = &ref_arg(trace, "trace")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if k > t.iterations.len() {
            return Err(Fail(
                SmStatus::SmErrInvalidArgument,
                format!("iteration {k} beyond the {} completed", t.iterations.len()),
            ));
        }
        *out = from_pose(&t.pose_at(k));
        Ok(())
    })
}

/// True when a solver failure cut the trace short.
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_trace_failed(trace: *const SmTrace) -> bool {
    trace.as_ref().is_some_and(|t| t.0.failure.is_some())
}

/// ADD / ADD-S and pose errors of `pred` against `gt`.
///
/// # Safety
/// Pointers must be valid; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_evaluate(
    mesh: *const SmMesh,
    gt: *const SmPose,
    pred: *const SmPose,
    out: *mut SmMetrics,
) -> SmStatus {
    guard(|| {
        let mesh = &ref_arg(mesh, "mesh")?.0;
        let g = to_pose(ref_arg(gt, "gt")?)?;
        let p = to_pose(ref_arg(pred, "pred")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let r = evaluate(mesh, &g, &p)?;
        *out = SmMetrics {
            add: r.add,
            adds: r.adds,
            diameter: r.diameter,
            rotation_error_deg: r.rotation_error_deg,
            translation_error: r.translation_error,
            add_pass_01d: r.add_pass_01d,
            add_pass_005d: r.add_pass_005d,
        };
        Ok(())
    })
}
