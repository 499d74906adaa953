//! Camera model, rigid poses, the 6D rotation encoding and residual-pose
//! composition.
//!
//! Rotation deltas act on the left (camera frame, about the object center)
//! and never move the translation. Translation deltas are image-plane
//! offsets of the projected object center plus a log depth ratio, which keeps
//! [`compose_pose`] exactly invertible through [`decompose_pose`].

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality / determinant tolerance for a valid rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Points with camera-frame depth at or below this are not projectable.
pub const MIN_DEPTH: f64 = 1e-9;

/// Pinhole intrinsics plus the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }

    /// Projects a camera-frame point. `None` when it is not in front of the camera.
    #[inline]
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Option<Projection> {
        if pc.z <= MIN_DEPTH {
            return None;
        }
        Some(Projection {
            pixel: Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy),
            depth: pc.z,
        })
    }
}

/// A pixel location together with the projective scale (camera-frame depth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Object pose in the camera frame: `x_cam = R * x_model + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseJson", into = "PoseJson")]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// On-disk pose layout: `{"R": [9 row-major], "t": [3]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl TryFrom<PoseJson> for RigidPose {
    type Error = Error;

    fn try_from(j: PoseJson) -> Result<Self> {
        let r = Matrix3::from_row_slice(&j.r);
        let t = Vector3::from(j.t);
        RigidPose::from_approximate(r, t)
    }
}

impl From<RigidPose> for PoseJson {
    fn from(p: RigidPose) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = p.rotation[(i, j)];
            }
        }
        PoseJson {
            r,
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, rejecting rotations that are not orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Like [`RigidPose::new`] but snaps a nearly-orthonormal matrix (e.g.
    /// printed with limited precision) onto SO(3) first.
    pub fn from_approximate(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if dev > 1e-3 || rotation.determinant() <= 0.0 {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {dev:.3e}, det = {:.6})",
                rotation.determinant()
            )));
        }
        Self::new(project_to_so3(&rotation), translation)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::NonFinite("pose"));
        }
        let dev = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if dev > ROTATION_TOLERANCE {
            return Err(Error::InvalidPose(format!("RᵀR deviates from identity by {dev:.3e}")));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidPose(format!("det(R) = {det}")));
        }
        Ok(())
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn project(&self, p: &Vector3<f64>, k: &CameraIntrinsics) -> Option<Projection> {
        k.project_camera_point(&self.transform(p))
    }
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Projects model-frame points through `pose` and `k`. Entries are `None`
/// for points at or behind the camera plane; the batch is never aborted.
pub fn project(points: &[Vector3<f64>], pose: &RigidPose, k: &CameraIntrinsics) -> Vec<Option<Projection>> {
    points.iter().map(|p| pose.project(p, k)).collect()
}

/// First two rotation-matrix columns, stacked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn encode(r: &Matrix3<f64>) -> Self {
        Rotation6D([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
    }

    /// Gram-Schmidt back to a rotation matrix.
    pub fn decode(&self) -> Result<Matrix3<f64>> {
        let v = &self.0;
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("rotation encoding"));
        }
        let a1 = Vector3::new(v[0], v[1], v[2]);
        let a2 = Vector3::new(v[3], v[4], v[5]);
        let n1 = a1.norm();
        if n1 < 1e-12 {
            return Err(Error::DegenerateRotation);
        }
        let b1 = a1 / n1;
        let w = a2 - b1 * a2.dot(&b1);
        let n2 = w.norm();
        if n2 < 1e-12 || n2 < 1e-12 * a2.norm().max(1.0) {
            return Err(Error::DegenerateRotation);
        }
        let b2 = w / n2;
        let b3 = b1.cross(&b2);
        Ok(Matrix3::from_columns(&[b1, b2, b3]))
    }
}

/// Image-plane translation update: pixel offsets of the projected center and
/// `vz = ln(z_prev / z_new)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TranslationDelta {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub rot: Rotation6D,
    pub trans: TranslationDelta,
}

impl PoseDelta {
    pub const IDENTITY: PoseDelta = PoseDelta {
        rot: Rotation6D::IDENTITY,
        trans: TranslationDelta {
            vx: 0.0,
            vy: 0.0,
            vz: 0.0,
        },
    };
}

/// `prev ⊗ delta`.
pub fn compose_pose(prev: &RigidPose, delta: &PoseDelta, k: &CameraIntrinsics) -> Result<RigidPose> {
    let TranslationDelta { vx, vy, vz } = delta.trans;
    if !(vx.is_finite() && vy.is_finite() && vz.is_finite()) {
        return Err(Error::NonFinite("translation delta"));
    }
    let dr = delta.rot.decode()?;
    let mut rotation = dr * prev.rotation;
    // Re-orthonormalize once drift is measurable so long chains stay on SO(3).
    if (rotation.transpose() * rotation - Matrix3::identity()).abs().max() > 1e-13 {
        rotation = Rotation6D::encode(&rotation).decode()?;
    }

    let t = &prev.translation;
    if t.z <= 0.0 {
        return Err(Error::InvalidPose(format!("non-positive depth {}", t.z)));
    }
    let scale = (-vz).exp();
    let z = t.z * scale;
    let x = (t.x + vx * t.z / k.fx) * scale;
    let y = (t.y + vy * t.z / k.fy) * scale;
    let translation = Vector3::new(x, y, z);
    if !translation.iter().all(|v| v.is_finite()) || z <= 0.0 {
        return Err(Error::NonFinite("composed translation"));
    }
    Ok(RigidPose { rotation, translation })
}

/// Inverse of [`compose_pose`]: the delta taking `prev` to `next`.
pub fn decompose_pose(prev: &RigidPose, next: &RigidPose, k: &CameraIntrinsics) -> PoseDelta {
    let dr = next.rotation * prev.rotation.transpose();
    let (tp, tn) = (&prev.translation, &next.translation);
    PoseDelta {
        rot: Rotation6D::encode(&dr),
        trans: TranslationDelta {
            vx: k.fx * (tn.x / tn.z - tp.x / tp.z),
            vy: k.fy * (tn.y / tn.z - tp.y / tp.z),
            vz: (tp.z / tn.z).ln(),
        },
    }
}

/// Rotation angle between two poses in degrees and translation distance in meters.
pub fn pose_errors(a: &RigidPose, b: &RigidPose) -> (f64, f64) {
    let c = ((a.rotation.transpose() * b.rotation).trace() - 1.0) / 2.0;
    let angle = c.clamp(-1.0, 1.0).acos().to_degrees();
    (angle, (a.translation - b.translation).norm())
}

/// Rotation by `angle_deg` about `axis` (need not be normalized).
pub fn axis_angle(axis: &Vector3<f64>, angle_deg: f64) -> Matrix3<f64> {
    let axis = nalgebra::Unit::new_normalize(*axis);
    *Rotation3::from_axis_angle(&axis, angle_deg.to_radians()).matrix()
}

/// Skew-symmetric cross-product matrix.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SO(3) exponential (Rodrigues).
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + hat(w);
    }
    *Rotation3::from_scaled_axis(*w).matrix()
}

/// Uniformly random rotation (Shoemake's quaternion method).
pub fn random_rotation<R: rand::Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    use std::f64::consts::TAU;
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    );
    *nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .matrix()
}
