//! SO(3) / SE(3) machinery.
//!
//! Rotations are stored as 3x3 matrices, twists as `[ω, υ]` with the
//! rotational part first. `ominus(a, b) = Log(a⁻¹ b)` is the only difference
//! operator used anywhere in the crate; Jacobians elsewhere assume a
//! right-multiplied perturbation `T · Exp(ξ)`.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle (rad) the Rodrigues coefficients switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Below this `sin θ` the logarithm extracts the axis from the symmetric part.
const NEAR_PI_SIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("frame mismatch: {left} vs {right}")]
    FrameMismatch { left: FramePair, right: FramePair },
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotARotation(f64),
    #[error("expected 12 transform values, got {0}")]
    BadTransformLength(usize),
}

/// Coordinate frame label carried by a [`Transform`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Frame {
    /// Wildcard, compatible with every frame.
    #[default]
    Any,
    /// Pivot / trocar frame `T`.
    World,
    /// Laparoscope body frame `C`.
    Camera,
    /// Left lens `C0`.
    Lens0,
    /// Right lens `C1`.
    Lens1,
}

impl Frame {
    pub fn compatible(self, other: Frame) -> bool {
        self == Frame::Any || other == Frame::Any || self == other
    }

    fn resolve(self, other: Frame) -> Frame {
        if self == Frame::Any {
            other
        } else {
            self
        }
    }
}

/// `(to, from)`: a transform tagged `(A, B)` maps coordinates in `B` into `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FramePair {
    pub to: Frame,
    pub from: Frame,
}

impl fmt::Display for FramePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}<-{:?}", self.to, self.from)
    }
}

/// Skew-symmetric matrix such that `hat(v) * w == v.cross(w)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] (reads the antisymmetric part).
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Which branch [`Rotation::log_with_branch`] used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBranch {
    SmallAngle,
    Regular,
    /// Axis taken from the symmetric part; at exactly π the sign is chosen so
    /// that the largest-magnitude axis component is positive.
    NearPi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Accepts matrices within `1e-9` of orthonormal as-is, re-projects those
    /// within `1e-4`, and rejects the rest.
    pub fn from_matrix(m: Mat3) -> Result<Self, GeometryError> {
        let err = orthonormality_error(&m);
        if !err.is_finite() || err > 1e-4 || m.determinant() <= 0.0 {
            return Err(GeometryError::NotARotation(err));
        }
        if err > 1e-9 {
            Ok(Rotation(m).renormalized())
        } else {
            Ok(Rotation(m))
        }
    }

    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn exp(omega: &Vec3) -> Self {
        exp_so3(omega)
    }

    pub fn log(&self) -> Vec3 {
        self.log_with_branch().0
    }

    pub fn log_with_branch(&self) -> (Vec3, LogBranch) {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let w = vee(m);
        let sin = w.norm();
        let theta = sin.atan2(cos);

        if theta < SMALL_ANGLE {
            return (w * (1.0 + theta * theta / 6.0), LogBranch::SmallAngle);
        }
        if sin > NEAR_PI_SIN || cos > 0.0 {
            return (w * (theta / sin), LogBranch::Regular);
        }

        // (R + Rᵀ)/2 - cos I = (1 - cos) a aᵀ
        let sym = (m + m.transpose()) * 0.5 - Mat3::identity() * cos;
        let mut k = 0;
        for i in 1..3 {
            if sym[(i, i)] > sym[(k, k)] {
                k = i;
            }
        }
        let mut axis: Vec3 = sym.column(k).into_owned();
        axis /= axis.norm();
        if sin > 1e-12 && axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        (axis * theta, LogBranch::NearPi)
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Nearest rotation in the Frobenius sense.
    pub fn renormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Rotation(r)
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }

    /// Rotation about a unit axis.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        exp_so3(&(axis.normalize() * angle))
    }
}

fn orthonormality_error(m: &Mat3) -> f64 {
    (m * m.transpose() - Mat3::identity()).norm()
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;
    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rodrigues formula, with a second-order Taylor branch below [`SMALL_ANGLE`].
pub fn exp_so3(omega: &Vec3) -> Rotation {
    let theta = omega.norm();
    let w = hat(omega);
    if theta < SMALL_ANGLE {
        return Rotation(Mat3::identity() + w + w * w * 0.5);
    }
    let half = 0.5 * theta;
    let a = theta.sin() / theta;
    let b = 2.0 * (half.sin() / theta).powi(2);
    Rotation(Mat3::identity() + w * a + w * w * b)
}

pub fn log_so3(r: &Rotation) -> Vec3 {
    r.log()
}

/// Left Jacobian of SO(3): `Exp(ω + δ) ≈ Exp(J_l δ) Exp(ω)`.
pub fn left_jacobian(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = hat(omega);
    let (a, b) = if theta < 1e-4 {
        let t2 = theta * theta;
        (0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let half = 0.5 * theta;
        (
            2.0 * (half.sin() / theta).powi(2),
            (theta - theta.sin()) / (theta * theta * theta),
        )
    };
    Mat3::identity() + w * a + w * w * b
}

pub fn left_jacobian_inverse(omega: &Vec3) -> Mat3 {
    let theta = omega.norm();
    let w = hat(omega);
    let c = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / (theta * theta)
    };
    Mat3::identity() - w * 0.5 + w * w * c
}

/// Right Jacobian: `Exp(ω + δ) ≈ Exp(ω) Exp(J_r δ)`.
pub fn right_jacobian(omega: &Vec3) -> Mat3 {
    left_jacobian(&-omega)
}

pub fn right_jacobian_inverse(omega: &Vec3) -> Mat3 {
    left_jacobian_inverse(&-omega)
}

/// Element of se(3) ≅ ℝ⁶, ordered `[ω, υ]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vec3,
    pub upsilon: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, upsilon: Vec3) -> Self {
        Self { omega, upsilon }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            omega: v.fixed_rows::<3>(0).into_owned(),
            upsilon: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.upsilon.x,
            self.upsilon.y,
            self.upsilon.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform `to ← from`: `p_to = R p_from + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    rotation: Rotation,
    translation: Vec3,
    frames: FramePair,
}

impl Default for Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Transform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
            frames: FramePair::default(),
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vec3::zeros())
    }

    pub fn from_rotation(rotation: Rotation) -> Self {
        Self::new(rotation, Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Rotation::identity(), translation)
    }

    pub fn with_frames(mut self, to: Frame, from: Frame) -> Self {
        self.frames = FramePair { to, from };
        self
    }

    pub fn rotation(&self) -> &Rotation {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn frames(&self) -> FramePair {
        self.frames
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            translation: -(rt.0 * self.translation),
            rotation: rt,
            frames: FramePair {
                to: self.frames.from,
                from: self.frames.to,
            },
        }
    }

    /// Applies the transform to a point.
    pub fn act(&self, p: &Vec3) -> Vec3 {
        self.rotation.0 * p + self.translation
    }

    /// `self · rhs`, checking in debug builds that `rhs` maps into the frame
    /// `self` maps from.
    pub fn compose(&self, rhs: &Transform) -> Transform {
        debug_assert!(
            self.frames.from.compatible(rhs.frames.to),
            "composing {} with {}",
            self.frames,
            rhs.frames
        );
        Transform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation.0 * rhs.translation + self.translation,
            frames: FramePair {
                to: self.frames.to.resolve(rhs.frames.to),
                from: rhs.frames.from.resolve(self.frames.from),
            },
        }
    }

    /// `self · Exp(ξ)`.
    pub fn retract(&self, xi: &Twist) -> Transform {
        let mut out = self.compose(&exp_se3(xi));
        out.frames = self.frames;
        out
    }

    pub fn exp(xi: &Twist) -> Self {
        exp_se3(xi)
    }

    pub fn log(&self) -> Twist {
        log_se3(self)
    }

    /// The 12 entries of `[R | t]` in row-major order.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation.0;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self, GeometryError> {
        if v.len() != 12 {
            return Err(GeometryError::BadTransformLength(v.len()));
        }
        let m = Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Ok(Self::new(
            Rotation::from_matrix(m)?,
            Vec3::new(v[3], v[7], v[11]),
        ))
    }
}

impl Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        self.compose(&rhs)
    }
}

impl Mul<&Transform> for &Transform {
    type Output = Transform;
    fn mul(self, rhs: &Transform) -> Transform {
        self.compose(rhs)
    }
}

pub fn exp_se3(xi: &Twist) -> Transform {
    Transform::new(
        exp_so3(&xi.omega),
        left_jacobian(&xi.omega) * xi.upsilon,
    )
}

pub fn log_se3(t: &Transform) -> Twist {
    let omega = t.rotation.log();
    Twist::new(omega, left_jacobian_inverse(&omega) * t.translation)
}

/// `Log(a⁻¹ b)`; both transforms must carry compatible frame tags.
pub fn ominus(a: &Transform, b: &Transform) -> Result<Twist, GeometryError> {
    let (fa, fb) = (a.frames, b.frames);
    if !fa.to.compatible(fb.to) || !fa.from.compatible(fb.from) {
        return Err(GeometryError::FrameMismatch {
            left: fa,
            right: fb,
        });
    }
    Ok(log_se3(&a.inverse().compose(b)))
}

/// `Log(a⁻¹ b)` on SO(3).
pub fn ominus_so3(a: &Rotation, b: &Rotation) -> Vec3 {
    (a.transpose() * *b).log()
}

/// Pose restricted to the remote-center-of-motion manifold: rotate about the
/// pivot, then translate along the camera x-axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PivotPose {
    pub depth: f64,
    pub rotation: Rotation,
}

impl PivotPose {
    pub fn new(depth: f64, rotation: Rotation) -> Self {
        Self { depth, rotation }
    }
}

/// `Trans(depth · e_x) · Rot(R)`, tagged camera ← world.
pub fn expand_pivot(p: &PivotPose) -> Transform {
    Transform::new(p.rotation, Vec3::new(p.depth, 0.0, 0.0)).with_frames(Frame::Camera, Frame::World)
}

/// Splits a pose into its pivot part and the `(t_y, t_z)` components that
/// violate the constraint.
pub fn extract_pivot(t: &Transform) -> (PivotPose, Vec2) {
    let tr = t.translation();
    (
        PivotPose::new(tr.x, *t.rotation()),
        Vec2::new(tr.y, tr.z),
    )
}

pub fn rot_x(angle: f64) -> Rotation {
    exp_so3(&(Vec3::x() * angle))
}

pub fn rot_y(angle: f64) -> Rotation {
    exp_so3(&(Vec3::y() * angle))
}

pub fn rot_z(angle: f64) -> Rotation {
    exp_so3(&(Vec3::z() * angle))
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = (a + PI).rem_euclid(2.0 * PI) - PI;
    if x <= -PI {
        x += 2.0 * PI;
    }
    x
}
