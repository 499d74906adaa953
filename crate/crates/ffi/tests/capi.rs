use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use shapematch_ffi::*;

const K: SmIntrinsics = SmIntrinsics {
    fx: 572.0,
    fy: 572.0,
    cx: 64.0,
    cy: 64.0,
    width: 128,
    height: 128,
};

fn pose(t: [f64; 3]) -> SmPose {
    SmPose {
        // 30° about x
        rotation: [
            1.0,
            0.0,
            0.0,
            0.0,
            0.866_025_403_784_438_6,
            -0.5,
            0.0,
            0.5,
            0.866_025_403_784_438_6,
        ],
        translation: t,
    }
}

fn mesh(name: &str) -> *mut SmMesh {
    let src = CString::new(name).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { sm_mesh_load(src.as_ptr(), &mut m) }, SmStatus::SmOk);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = sm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn mesh_lifecycle_and_errors() {
    let m = mesh("checker_cube");
    let d = unsafe { sm_mesh_diameter(m) };
    assert!((d - 0.1 * 3f64.sqrt()).abs() < 1e-12);
    unsafe { sm_mesh_free(m) };
    unsafe { sm_mesh_free(ptr::null_mut()) };
    assert!(unsafe { sm_mesh_diameter(ptr::null()) } < 0.0);

    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { sm_mesh_load(ptr::null(), &mut out) },
        SmStatus::SmErrNullPointer
    );
    assert!(out.is_null());
    assert!(last_error().contains("source"));
    let missing = CString::new("/nonexistent/mesh.ply").unwrap();
    assert_eq!(unsafe { sm_mesh_load(missing.as_ptr(), &mut out) }, SmStatus::SmErrIo);
    assert!(last_error().contains("/nonexistent/mesh.ply"));
    assert_eq!(
        unsafe { sm_mesh_load(missing.as_ptr(), ptr::null_mut()) },
        SmStatus::SmErrNullPointer
    );
}

#[test]
fn render_and_flow_buffers() {
    let m = mesh("checker_cube");
    let n = 128 * 128;
    let p = pose([0.0, 0.0, 0.6]);
    let (mut rgb, mut mask, mut depth) = (vec![0f32; 3 * n], vec![0u8; n], vec![0f64; n]);
    let s = unsafe { sm_render(m, &p, &K, rgb.as_mut_ptr(), mask.as_mut_ptr(), depth.as_mut_ptr()) };
    assert_eq!(s, SmStatus::SmOk);
    let covered = mask.iter().filter(|&&v| v == 1).count();
    assert!(covered > 1000);
    for i in 0..n {
        assert_eq!(mask[i] == 1, depth[i].is_finite());
    }
    // mask only
    let mut mask2 = vec![0u8; n];
    let s = unsafe { sm_render(m, &p, &K, ptr::null_mut(), mask2.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!((s, &mask2), (SmStatus::SmOk, &mask));

    let (mut flow, mut valid) = (vec![1f32; 2 * n], vec![0u8; n]);
    let s = unsafe { sm_pose_flow(m, &p, &p, &K, flow.as_mut_ptr(), valid.as_mut_ptr()) };
    assert_eq!(s, SmStatus::SmOk);
    assert_eq!(valid, mask);
    for i in 0..n {
        if valid[i] == 1 {
            assert_eq!((flow[2 * i], flow[2 * i + 1]), (0.0, 0.0));
        }
    }
    let s = unsafe { sm_pose_flow(m, &p, &p, &K, ptr::null_mut(), valid.as_mut_ptr()) };
    assert_eq!(s, SmStatus::SmErrNullPointer);

    let bad_k = SmIntrinsics { fx: -1.0, ..K };
    assert_eq!(
        unsafe { sm_render(m, &p, &bad_k, rgb.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) },
        SmStatus::SmErrInvalidArgument
    );
    let skew = SmPose {
        rotation: [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ..p
    };
    assert_eq!(
        unsafe { sm_render(m, &skew, &K, rgb.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) },
        SmStatus::SmErrInvalidArgument
    );
    unsafe { sm_mesh_free(m) };
}

#[test]
fn refine_and_evaluate() {
    let m = mesh("checker_cube");
    let n = 128 * 128;
    let gt = pose([0.0, 0.0, 0.5]);
    let mut rgb = vec![0f32; 3 * n];
    assert_eq!(
        unsafe { sm_render(m, &gt, &K, rgb.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) },
        SmStatus::SmOk
    );
    let cfg = CString::new(r#"{"iterations": 3, "seed": 4}"#).unwrap();
    let mut trace = ptr::null_mut();
    let s = unsafe { sm_refine(m, rgb.as_ptr(), &K, &gt, cfg.as_ptr(), &mut trace) };
    assert_eq!(s, SmStatus::SmOk);
    assert_eq!(unsafe { sm_trace_iterations(trace) }, 3);
    assert!(!unsafe { sm_trace_failed(trace) });
    let mut p0 = pose([9.0, 9.0, 9.0]);
    assert_eq!(unsafe { sm_trace_pose(trace, 0, &mut p0) }, SmStatus::SmOk);
    assert_eq!(p0, gt);
    let mut fin = p0;
    assert_eq!(unsafe { sm_trace_pose(trace, 3, &mut fin) }, SmStatus::SmOk);
    assert_eq!(
        unsafe { sm_trace_pose(trace, 4, &mut fin) },
        SmStatus::SmErrInvalidArgument
    );

    let mut metrics = SmMetrics::default();
    assert_eq!(unsafe { sm_evaluate(m, &gt, &fin, &mut metrics) }, SmStatus::SmOk);
    assert!(metrics.add_pass_005d && metrics.add < 0.005 * metrics.diameter);
    assert_eq!(unsafe { sm_evaluate(m, &gt, &gt, &mut metrics) }, SmStatus::SmOk);
    assert_eq!(metrics.add, 0.0);
    unsafe { sm_trace_free(trace) };

    let bad = CString::new(r#"{"iterations": 0}"#).unwrap();
    let s = unsafe { sm_refine(m, rgb.as_ptr(), &K, &gt, bad.as_ptr(), &mut trace) };
    assert_eq!(s, SmStatus::SmErrInvalidConfig);
    assert!(trace.is_null());
    assert!(last_error().contains("iterations"));
    let typo = CString::new(r#"{"iters": 2}"#).unwrap();
    let s = unsafe { sm_refine(m, rgb.as_ptr(), &K, &gt, typo.as_ptr(), &mut trace) };
    assert_eq!(s, SmStatus::SmErrInvalidConfig);

    let behind = pose([0.0, 0.0, -1.0]);
    let s = unsafe { sm_refine(m, rgb.as_ptr(), &K, &behind, ptr::null(), &mut trace) };
    assert_eq!(s, SmStatus::SmErrOutOfView);
    unsafe { sm_mesh_free(m) };
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(sm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/shapematch.h");
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn header_declares_every_export() {
    let h = header();
    let src = include_str!("../src/lib.rs");
    let exported: Vec<&str> = src
        .lines()
        .filter(|l| l.contains("extern \"C\" fn "))
        .map(|l| l.split("fn ").nth(1).unwrap().split('(').next().unwrap())
        .collect();
    assert!(exported.len() >= 12);
    for name in exported {
        assert!(h.contains(&format!("{name}(")), "{name} missing from header");
    }
    for t in [
        "typedef struct SmMesh SmMesh;",
        "typedef struct SmTrace SmTrace;",
        "SM_OK = 0",
        "SM_ERR_PANIC",
    ] {
        assert!(h.contains(t), "{t}");
    }
}

/// Compiles and runs a small C program against the static library.
#[test]
fn c_program_links_against_staticlib() {
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libshapematch_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let c_src = dir.path().join("smoke.c");
    std::fs::write(
        &c_src,
        r#"
#include <stdio.h>
#include "shapematch.h"
int main(void) {
    SmMesh *mesh = NULL;
    if (sm_mesh_load("icosphere", &mesh) != SM_OK) return 10;
    SmPose p = {{1,0,0, 0,1,0, 0,0,1}, {0,0,0.4}};
    SmIntrinsics k = {500, 500, 32, 32, 64, 64};
    unsigned char mask[64 * 64];
    if (sm_render(mesh, &p, &k, NULL, mask, NULL) != SM_OK) return 11;
    int n = 0;
    for (int i = 0; i < 64 * 64; i++) n += mask[i];
    SmMetrics m;
    if (sm_evaluate(mesh, &p, &p, &m) != SM_OK || m.add != 0.0) return 12;
    if (sm_mesh_load(NULL, &mesh) != SM_ERR_NULL_POINTER || sm_last_error() == NULL) return 13;
    sm_mesh_free(mesh);
    printf("%d\n", n);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .arg(&c_src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let covered: usize = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(covered > 100);
}
