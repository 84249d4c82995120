//! Manifold primitives: SE(3) camera poses with an exponential-map
//! retraction, Euclidean transport for shared point blocks, and a pinhole
//! camera with two-term radial distortion.
//!
//! Poses map world points into the camera frame, `p_cam = R * y + t`.
//! Tangent vectors are ordered `[omega; vee]` and perturb on the right:
//! `retract(T, xi) = T * exp(xi)`.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, SMatrix, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat2x6 = SMatrix<f64, 2, 6>;
pub type Mat3x6 = SMatrix<f64, 3, 6>;

/// A shared map point.
pub type Point3 = Vec3;

/// Points closer than this to the image plane (or behind it) do not project.
pub const DEPTH_EPS: f64 = 1e-8;

/// Below this rotation angle the closed forms switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-5;
const JACOBIAN_SMALL_ANGLE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    /// Scalar-first quaternion followed by the translation.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    /// Quaternions already of unit norm to rounding are kept bit-for-bit.
    pub fn from_array(a: [f64; 7]) -> Self {
        let raw = Quaternion::new(a[0], a[1], a[2], a[3]);
        let q = if (raw.norm() - 1.0).abs() <= 8.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::new_normalize(raw)
        };
        Self::new(q, Vec3::new(a[4], a[5], a[6]))
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform(&self, y: &Point3) -> Vec3 {
        self.rotation * y + self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.inverse() * self.translation)
    }

    /// Pose whose camera center is `center` with the same orientation.
    pub fn with_center(&self, center: &Vec3) -> Self {
        Self::new(self.rotation, -(self.rotation * center))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            renormalize(self.rotation * other.rotation),
            self.rotation * other.translation + self.translation,
        )
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        <[f64; 7]>::deserialize(d).map(Pose::from_array)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseTangent {
    pub omega: Vec3,
    pub vee: Vec3,
}

impl PoseTangent {
    pub fn zero() -> Self {
        Self {
            omega: Vec3::zeros(),
            vee: Vec3::zeros(),
        }
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            omega: v.fixed_rows::<3>(0).into_owned(),
            vee: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.vee.x,
            self.vee.y,
            self.vee.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.omega.iter().chain(self.vee.iter()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
}

impl CameraIntrinsics {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && [self.cx, self.cy, self.k1, self.k2].iter().all(|x| x.is_finite())
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Quaternion exponential of an axis-angle vector.
pub fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (real, imag_factor) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        let half = 0.5 * theta;
        (half.cos(), half.sin() / theta)
    };
    let v = omega * imag_factor;
    UnitQuaternion::new_normalize(Quaternion::new(real, v.x, v.y, v.z))
}

/// Left Jacobian of SO(3), the `V` block of the SE(3) exponential.
pub fn so3_left_jacobian(omega: &Vec3) -> Mat3 {
    let theta_sq = omega.norm_squared();
    let w = skew(omega);
    let (a, b) = if theta_sq.sqrt() < JACOBIAN_SMALL_ANGLE {
        let t4 = theta_sq * theta_sq;
        (
            0.5 - theta_sq / 24.0 + t4 / 720.0 - t4 * theta_sq / 40320.0,
            1.0 / 6.0 - theta_sq / 120.0 + t4 / 5040.0 - t4 * theta_sq / 362880.0,
        )
    } else {
        let theta = theta_sq.sqrt();
        let s = (0.5 * theta).sin();
        (2.0 * s * s / theta_sq, (theta - theta.sin()) / (theta_sq * theta))
    };
    Mat3::identity() + w * a + w * w * b
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// `pose * exp(xi)`. The zero tangent returns the pose bit-for-bit.
pub fn se3_retract(pose: &Pose, xi: &PoseTangent) -> Pose {
    if xi.omega == Vec3::zeros() && xi.vee == Vec3::zeros() {
        return *pose;
    }
    let dq = so3_exp(&xi.omega);
    let dt = so3_left_jacobian(&xi.omega) * xi.vee;
    Pose::new(renormalize(pose.rotation * dq), pose.translation + pose.rotation * dt)
}

/// Euclidean retraction for shared point blocks.
pub fn point_retract(y: &Point3, v: &Vec3) -> Point3 {
    y + v
}

/// Vector and operator transport between tangent spaces of a shared block.
///
/// Shared blocks are points in R^3 whose tangent spaces all coincide, so the
/// only implementation is the identity. The trait keeps the seam where a
/// manifold-valued shared block would plug in a projection-based transporter.
pub trait BlockTransport {
    fn transport(&self, from: &Point3, to: &Point3, v: &Vec3) -> Vec3;

    /// Adjoint of `transport(from, to, .)`, mapping back to `from`.
    fn transport_adjoint(&self, from: &Point3, to: &Point3, v: &Vec3) -> Vec3;

    /// `T o op o T*` where `T` carries tangents from `from` to `to`.
    fn transport_operator(&self, from: &Point3, to: &Point3, op: &Mat3) -> Mat3;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EuclideanTransport;

impl BlockTransport for EuclideanTransport {
    fn transport(&self, _from: &Point3, _to: &Point3, v: &Vec3) -> Vec3 {
        *v
    }

    fn transport_adjoint(&self, _from: &Point3, _to: &Point3, v: &Vec3) -> Vec3 {
        *v
    }

    fn transport_operator(&self, _from: &Point3, _to: &Point3, op: &Mat3) -> Mat3 {
        *op
    }
}

pub fn transporter_apply(from: &Point3, to: &Point3, tangent: &Vec3) -> Vec3 {
    EuclideanTransport.transport(from, to, tangent)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vec2,
    pub valid: bool,
}

fn distort(intr: &CameraIntrinsics, n: &Vec2) -> Vec2 {
    let r2 = n.norm_squared();
    let d = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2;
    Vec2::new(intr.fx * d * n.x + intr.cx, intr.fy * d * n.y + intr.cy)
}

pub fn project(pose: &Pose, intr: &CameraIntrinsics, point: &Point3) -> Projection {
    let p = pose.transform(point);
    if !(p.z > DEPTH_EPS) {
        return Projection {
            pixel: Vec2::zeros(),
            valid: false,
        };
    }
    let n = Vec2::new(p.x / p.z, p.y / p.z);
    Projection {
        pixel: distort(intr, &n),
        valid: true,
    }
}

/// Jacobians of the residual `q - project(pose, point)` with respect to the
/// pose tangent (through [`se3_retract`]) and the point coordinates.
///
/// Only meaningful when the projection is valid.
pub fn project_jacobians(pose: &Pose, intr: &CameraIntrinsics, point: &Point3) -> (Mat2x6, Matrix2x3<f64>) {
    let r = pose.rotation_matrix();
    let p = r * point + pose.translation;
    let inv_z = 1.0 / p.z;
    let n = Vec2::new(p.x * inv_z, p.y * inv_z);
    let dn_dp = Matrix2x3::new(inv_z, 0.0, -n.x * inv_z, 0.0, inv_z, -n.y * inv_z);
    let r2 = n.norm_squared();
    let d = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2;
    let dd_dn = n * (2.0 * (intr.k1 + 2.0 * intr.k2 * r2));
    let mut dpix_dn = nalgebra::Matrix2::identity() * d + n * dd_dn.transpose();
    dpix_dn.row_mut(0).scale_mut(intr.fx);
    dpix_dn.row_mut(1).scale_mut(intr.fy);
    // Residual is measurement minus prediction.
    let dr_dp = -(dpix_dn * dn_dp);
    let dp_domega = -(r * skew(point));
    let mut j_pose = Mat2x6::zeros();
    j_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dr_dp * dp_domega));
    j_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(dr_dp * r));
    (j_pose, dr_dp * r)
}

/// Residual `y - R q - t` of a 3D registration factor.
pub fn registration_residual(pose: &Pose, q: &Vec3, point: &Point3) -> Vec3 {
    point - pose.rotation * q - pose.translation
}

/// Jacobians of [`registration_residual`] with respect to the pose tangent
/// and the point.
pub fn registration_jacobians(pose: &Pose, q: &Vec3) -> (Mat3x6, Mat3) {
    let r = pose.rotation_matrix();
    let mut j_pose = Mat3x6::zeros();
    j_pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * skew(q)));
    j_pose.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r));
    (j_pose, Mat3::identity())
}
