//! ADD / ADD-S pose accuracy.

use std::io::Write;

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_errors, RigidPose};
use crate::mesh::TriangleMesh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub add: f64,
    pub adds: f64,
    pub diameter: f64,
    pub add_pass_01d: bool,
    pub add_pass_005d: bool,
    pub adds_pass_01d: bool,
    pub adds_pass_005d: bool,
    pub rotation_error_deg: f64,
    pub translation_error: f64,
}

/// Mean distance between corresponding transformed vertices.
pub fn add_metric(mesh: &TriangleMesh, pgt: &RigidPose, pred: &RigidPose) -> Result<f64> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let sum: f64 = mesh
        .vertices
        .iter()
        .map(|v| (pred.transform(v) - pgt.transform(v)).norm())
        .sum();
    Ok(sum / mesh.vertices.len() as f64)
}

/// Mean distance from each gt-transformed vertex to the nearest
/// pred-transformed vertex. Nearest neighbours are exact (kd-tree).
pub fn adds_metric(mesh: &TriangleMesh, pgt: &RigidPose, pred: &RigidPose) -> Result<f64> {
    if mesh.vertices.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let moved: Vec<[f64; 3]> = mesh
        .vertices
        .iter()
        .map(|v| {
            let p = pred.transform(v);
            [p.x, p.y, p.z]
        })
        .collect();
    let mut tree = KdTree::with_capacity(3, 16);
    for (i, p) in moved.iter().enumerate() {
        tree.add(*p, i).expect("finite vertex");
    }
    let mut sum = 0.0;
    for v in &mesh.vertices {
        let q = pgt.transform(v);
        let (_, &j) = tree
            .nearest(&[q.x, q.y, q.z], 1, &squared_euclidean)
            .map_err(|e| Error::NonFinite(kd_error(e)))?[0];
        sum += (Vector3::from(moved[j]) - q).norm();
    }
    Ok(sum / mesh.vertices.len() as f64)
}

fn kd_error(e: kdtree::ErrorKind) -> &'static str {
    match e {
        kdtree::ErrorKind::NonFiniteCoordinate => "non-finite coordinate in ADD-S",
        _ => "nearest-neighbour query failed",
    }
}

/// `value < fraction · diameter` (the boundary fails).
pub fn success_at(value: f64, diameter: f64, fraction: f64) -> bool {
    value < fraction * diameter
}

pub fn evaluate(mesh: &TriangleMesh, pgt: &RigidPose, pred: &RigidPose) -> Result<MetricReport> {
    let add = add_metric(mesh, pgt, pred)?;
    let adds = adds_metric(mesh, pgt, pred)?;
    let d = mesh.diameter;
    let (rot, trans) = pose_errors(pred, pgt);
    Ok(MetricReport {
        add,
        adds,
        diameter: d,
        add_pass_01d: success_at(add, d, 0.1),
        add_pass_005d: success_at(add, d, 0.05),
        adds_pass_01d: success_at(adds, d, 0.1),
        adds_pass_005d: success_at(adds, d, 0.05),
        rotation_error_deg: rot,
        translation_error: trans,
    })
}

pub const METRIC_CSV_HEADER: [&str; 10] = [
    "instance",
    "add_m",
    "adds_m",
    "diameter_m",
    "add_pass_0.1d",
    "add_pass_0.05d",
    "adds_pass_0.1d",
    "adds_pass_0.05d",
    "rotation_error_deg",
    "translation_error_m",
];

/// One CSV row per named report, header first.
pub fn write_metric_csv<W: Write>(out: W, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRIC_CSV_HEADER)?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            format!("{:.9}", r.add),
            format!("{:.9}", r.adds),
            format!("{:.9}", r.diameter),
            (r.add_pass_01d as u8).to_string(),
            (r.add_pass_005d as u8).to_string(),
            (r.adds_pass_01d as u8).to_string(),
            (r.adds_pass_005d as u8).to_string(),
            format!("{:.6}", r.rotation_error_deg),
            format!("{:.9}", r.translation_error),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, random_rotation};
    use crate::mesh::{icosphere, BuiltinMesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> RigidPose {
        RigidPose::new(
            random_rotation(rng),
            Vector3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(0.5..1.5),
            ),
        )
        .unwrap()
    }

    fn brute_adds(mesh: &TriangleMesh, gt: &RigidPose, pred: &RigidPose) -> f64 {
        let moved: Vec<_> = mesh.vertices.iter().map(|v| pred.transform(v)).collect();
        let mut sum = 0.0;
        for v in &mesh.vertices {
            let q = gt.transform(v);
            let mut best = f64::INFINITY;
            let mut best_d = 0.0;
            for m in &moved {
                let d2 = (m - q).norm_squared();
                if d2 < best {
                    best = d2;
                    best_d = (m - q).norm();
                }
            }
            sum += best_d;
        }
        sum / mesh.vertices.len() as f64
    }

    #[test]
    fn identical_poses_score_zero() {
        let mesh = BuiltinMesh::CheckerCube.build();
        let p = random_pose(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(add_metric(&mesh, &p, &p).unwrap(), 0.0);
        assert_eq!(adds_metric(&mesh, &p, &p).unwrap(), 0.0);
        let r = evaluate(&mesh, &p, &p).unwrap();
        assert!(r.add_pass_005d && r.adds_pass_01d);
    }

    #[test]
    fn pure_translation_gives_its_norm() {
        let mesh = BuiltinMesh::Icosphere.build();
        let gt = random_pose(&mut ChaCha8Rng::seed_from_u64(2));
        let t = Vector3::new(0.003, -0.004, 0.012);
        let pred = RigidPose {
            rotation: gt.rotation,
            translation: gt.translation + t,
        };
        assert!((add_metric(&mesh, &gt, &pred).unwrap() - t.norm()).abs() < 1e-12);
    }

    #[test]
    fn add_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mesh = BuiltinMesh::CheckerCube.build();
        for _ in 0..20 {
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let mut sum = 0.0;
            for v in &mesh.vertices {
                let pa = a.rotation * v + a.translation;
                let pb = b.rotation * v + b.translation;
                sum += ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2) + (pa.z - pb.z).powi(2)).sqrt();
            }
            let naive = sum / mesh.vertices.len() as f64;
            assert!((add_metric(&mesh, &a, &b).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn adds_equals_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mesh in [BuiltinMesh::CheckerCube.build(), icosphere(0.05, 3)] {
            assert!(mesh.vertices.len() <= 2000);
            for _ in 0..5 {
                let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
                assert_eq!(adds_metric(&mesh, &a, &b).unwrap(), brute_adds(&mesh, &a, &b));
            }
        }
    }

    #[test]
    fn symmetric_plate_half_turn() {
        let s = 0.05;
        let verts = vec![
            Vector3::new(s, s, 0.0),
            Vector3::new(-s, s, 0.0),
            Vector3::new(-s, -s, 0.0),
            Vector3::new(s, -s, 0.0),
        ];
        let mesh = TriangleMesh::new(verts, vec![[0, 1, 2], [0, 2, 3]], None).unwrap();
        let gt = RigidPose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let pred = RigidPose {
            rotation: axis_angle(&Vector3::z(), 180.0),
            translation: gt.translation,
        };
        assert!(adds_metric(&mesh, &gt, &pred).unwrap() < 1e-9);
        // each corner swaps with its opposite: distance 2·s·√2
        assert!((add_metric(&mesh, &gt, &pred).unwrap() - 2.0 * s * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn adds_never_exceeds_add_and_left_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mesh = BuiltinMesh::CheckerCube.build();
        for _ in 0..100 {
            let (a, b, q) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            let add = add_metric(&mesh, &a, &b).unwrap();
            assert!(adds_metric(&mesh, &a, &b).unwrap() <= add);
            let moved = add_metric(&mesh, &q.then_after(&a), &q.then_after(&b)).unwrap();
            assert!((moved - add).abs() < 1e-9);
        }
    }

    #[test]
    fn threshold_is_strict() {
        assert!(success_at(0.0, 0.2, 0.1));
        assert!(!success_at(0.1 * 0.2, 0.2, 0.1));
        assert!(success_at(0.0199, 0.2, 0.1));
    }

    #[test]
    fn empty_mesh_errors() {
        let mesh = TriangleMesh {
            vertices: vec![],
            faces: vec![],
            texture: crate::mesh::Texture::Checker { cell: 1.0 },
            diameter: 0.0,
        };
        let p = RigidPose::identity();
        assert!(add_metric(&mesh, &p, &p).is_err());
        assert!(adds_metric(&mesh, &p, &p).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let mesh = BuiltinMesh::Tetra.build();
        let p = RigidPose::identity();
        let r = evaluate(&mesh, &p, &p).unwrap();
        let mut buf = Vec::new();
        write_metric_csv(&mut buf, &[("a".into(), r), ("b".into(), r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("instance,add_m"));
    }
}
