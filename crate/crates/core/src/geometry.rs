//! Camera and rigid-body geometry.
//!
//! The camera follows the unified spherical model (USM): a camera-frame point
//! is first lifted onto the unit sphere, then projected through a pinhole whose
//! centre is displaced by `xi` along the optical axis. With `xi = 0` this is the
//! plain pinhole camera.
//!
//! Rotations are unit quaternions `(w, x, y, z)`. Euler angles use the
//! intrinsic X-Y-Z convention, `R = Rx(a) * Ry(b) * Rz(c)`, in degrees.

use core::fmt;
use core::ops::Mul;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use serde::{Deserialize, Serialize};

/// A 3-vector in metres.
pub type Vec3 = [f64; 3];

/// Smallest admissible value of `s_z + xi` for a point to be projectable.
pub const PROJECTION_EPS: f64 = 1e-9;

/// Largest distortion coefficient accepted by [`CameraIntrinsics`].
pub const XI_MAX: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("pixel ({u}, {v}) lies outside the camera model domain")]
    OutsideModelDomain { u: f64, v: f64 },
    #[error("matrix is not a rotation (orthonormality drift {drift:e}, det {det})")]
    NotARotation { drift: f64, det: f64 },
}

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_row_major(v: &[f64; 9]) -> Self {
        Mat3([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        dot3(m[0], cross3(m[1], m[2]))
    }

    /// Largest absolute entry of `M^T M - I`.
    pub fn orthonormality_drift(&self) -> f64 {
        let p = self.transpose() * *self;
        let mut worst = 0.0f64;
        for (i, row) in p.0.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((v - target).abs());
            }
        }
        worst
    }

    fn inverse(&self) -> Option<Mat3> {
        let det = self.det();
        if det.abs() < 1e-300 {
            return None;
        }
        let m = &self.0;
        let c0 = cross3(m[1], m[2]);
        let c1 = cross3(m[2], m[0]);
        let c2 = cross3(m[0], m[1]);
        // columns of the inverse are the cofactor rows divided by det
        let inv = Mat3([c0, c1, c2]).transpose();
        let mut out = inv.0;
        for row in out.iter_mut() {
            for v in row.iter_mut() {
                *v /= det;
            }
        }
        Some(Mat3(out))
    }

    /// Nearest rotation in the Frobenius sense (orthogonal polar factor),
    /// computed with the Newton iteration `X <- (X + X^-T) / 2`.
    pub fn nearest_rotation(&self) -> Result<Mat3, GeometryError> {
        let det = self.det();
        let not_rot = GeometryError::NotARotation {
            drift: self.orthonormality_drift(),
            det,
        };
        if !(det > 0.0) {
            return Err(not_rot);
        }
        let mut x = *self;
        for _ in 0..64 {
            let inv_t = x.inverse().ok_or_else(|| not_rot.clone())?.transpose();
            let mut next = [[0.0; 3]; 3];
            let mut delta = 0.0f64;
            for i in 0..3 {
                for j in 0..3 {
                    next[i][j] = 0.5 * (x.0[i][j] + inv_t.0[i][j]);
                    delta = delta.max((next[i][j] - x.0[i][j]).abs());
                }
            }
            x = Mat3(next);
            if delta < 1e-15 {
                break;
            }
        }
        Ok(x)
    }
}

impl Mul for Mat3 {
    type Output = Mat3;

    fn mul(self, rhs: Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Mat3(out)
    }
}

/// Quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quaternion { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quaternion::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm3(axis);
        if n == 0.0 {
            return Quaternion::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / n;
        Quaternion::new(c, axis[0] * k, axis[1] * k, axis[2] * k)
    }

    pub fn dot(self, o: Quaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Self {
        let n2 = self.dot(self);
        // leave already-unit quaternions bit-identical
        if (n2 - 1.0).abs() <= 4.0 * f64::EPSILON {
            return self;
        }
        let n = n2.sqrt();
        Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn neg(self) -> Self {
        Quaternion::new(-self.w, -self.x, -self.y, -self.z)
    }

    /// Representative of `{q, -q}` with `w >= 0` (ties broken on x, y, z).
    pub fn canonical(self) -> Self {
        for c in [self.w, self.x, self.y, self.z] {
            if c > 0.0 {
                return self;
            }
            if c < 0.0 {
                return self.neg();
            }
        }
        self
    }

    pub fn conjugate(self) -> Self {
        Quaternion::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2w (u x v) + 2 u x (u x v)
        let u = [self.x, self.y, self.z];
        let uv = cross3(u, v);
        let uuv = cross3(u, uv);
        add3(v, add3(scale3(uv, 2.0 * self.w), scale3(uuv, 2.0)))
    }

    pub fn to_matrix(self) -> Mat3 {
        let Quaternion { w, x, y, z } = self;
        Mat3([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }

    /// Converts a rotation matrix (orthonormal within `1e-6`, det +1).
    pub fn from_matrix(m: &Mat3) -> Result<Self, GeometryError> {
        let drift = m.orthonormality_drift();
        let det = m.det();
        if drift > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::NotARotation { drift, det });
        }
        let r = &m.0;
        let trace = r[0][0] + r[1][1] + r[2][2];
        // Shepperd: pivot on the largest of w, x, y, z
        let q = if trace > r[0][0].max(r[1][1]).max(r[2][2]) {
            let s = (1.0 + trace).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (r[2][1] - r[1][2]) / s,
                (r[0][2] - r[2][0]) / s,
                (r[1][0] - r[0][1]) / s,
            )
        } else if r[0][0] >= r[1][1] && r[0][0] >= r[2][2] {
            let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (r[2][1] - r[1][2]) / s,
                0.25 * s,
                (r[0][1] + r[1][0]) / s,
                (r[0][2] + r[2][0]) / s,
            )
        } else if r[1][1] >= r[2][2] {
            let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
            Quaternion::new(
                (r[0][2] - r[2][0]) / s,
                (r[0][1] + r[1][0]) / s,
                0.25 * s,
                (r[1][2] + r[2][1]) / s,
            )
        } else {
            let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
            Quaternion::new(
                (r[1][0] - r[0][1]) / s,
                (r[0][2] + r[2][0]) / s,
                (r[1][2] + r[2][1]) / s,
                0.25 * s,
            )
        };
        Ok(q.normalized().canonical())
    }

    /// Intrinsic X-Y-Z Euler angles in degrees.
    pub fn from_euler_xyz_deg(e: [f64; 3]) -> Self {
        let qx = Quaternion::from_axis_angle([1.0, 0.0, 0.0], e[0].to_radians());
        let qy = Quaternion::from_axis_angle([0.0, 1.0, 0.0], e[1].to_radians());
        let qz = Quaternion::from_axis_angle([0.0, 0.0, 1.0], e[2].to_radians());
        (qx * qy * qz).canonical()
    }

    pub fn to_euler_xyz_deg(self) -> [f64; 3] {
        euler_xyz_deg_from_matrix(&self.normalized().to_matrix())
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(self) -> f64 {
        let q = self.normalized();
        let v = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        2.0 * v.atan2(q.w.abs())
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;

    /// Hamilton product: `(a * b).rotate(v) == a.rotate(b.rotate(v))`.
    fn mul(self, b: Quaternion) -> Quaternion {
        let a = self;
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }
}

fn euler_xyz_deg_from_matrix(r: &Mat3) -> [f64; 3] {
    let m = &r.0;
    // R = Rx(a) Ry(b) Rz(c): m02 = sin b, m12 = -sin a cos b, m22 = cos a cos b,
    // m01 = -cos b sin c, m00 = cos b cos c
    let b = m[0][2].atan2((m[0][0] * m[0][0] + m[0][1] * m[0][1]).sqrt());
    let a = (-m[1][2]).atan2(m[2][2]);
    let c = (-m[0][1]).atan2(m[0][0]);
    [a.to_degrees(), b.to_degrees(), c.to_degrees()]
}

/// One of the three supported rotation encodings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rotation {
    Quaternion(Quaternion),
    Matrix(Mat3),
    /// Intrinsic X-Y-Z, degrees.
    EulerXyzDeg([f64; 3]),
}

/// All three encodings of one rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationForms {
    pub quaternion: Quaternion,
    pub matrix: Mat3,
    pub euler_xyz_deg: [f64; 3],
}

/// Converts any rotation encoding into all three. The quaternion is returned
/// in canonical sign (`w >= 0`).
pub fn rotation_convert(r: Rotation) -> Result<RotationForms, GeometryError> {
    let q = match r {
        Rotation::Quaternion(q) => {
            let n = q.norm();
            if (n - 1.0).abs() > 1e-6 {
                return Err(GeometryError::NotARotation {
                    drift: (n - 1.0).abs(),
                    det: n * n,
                });
            }
            q.normalized().canonical()
        }
        Rotation::Matrix(m) => Quaternion::from_matrix(&m)?,
        Rotation::EulerXyzDeg(e) => Quaternion::from_euler_xyz_deg(e),
    };
    let matrix = match r {
        Rotation::Matrix(m) => m,
        _ => q.to_matrix(),
    };
    let euler_xyz_deg = match r {
        Rotation::EulerXyzDeg(e) => e,
        _ => euler_xyz_deg_from_matrix(&matrix),
    };
    Ok(RotationForms {
        quaternion: q,
        matrix,
        euler_xyz_deg,
    })
}

/// `1 - |<q1, q2>|`: zero for the same rotation, one for rotations 180 degrees
/// apart. Invariant under the sign of either argument; round-off below zero is
/// clamped.
pub fn quaternion_distance(q1: Quaternion, q2: Quaternion) -> f64 {
    debug_assert!((q1.norm() - 1.0).abs() <= 1e-6, "q1 not unit: {q1:?}");
    debug_assert!((q2.norm() - 1.0).abs() <= 1e-6, "q2 not unit: {q2:?}");
    (1.0 - q1.dot(q2).abs()).max(0.0)
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    q: Quaternion,
    t: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        q: Quaternion::IDENTITY,
        t: [0.0; 3],
    };

    /// Normalizes `q` and puts it in canonical sign.
    pub fn new(q: Quaternion, t: Vec3) -> Self {
        RigidTransform {
            q: q.normalized().canonical(),
            t,
        }
    }

    pub fn from_rotation_matrix(r: &Mat3, t: Vec3) -> Result<Self, GeometryError> {
        Ok(RigidTransform::new(Quaternion::from_matrix(r)?, t))
    }

    pub fn translation(t: Vec3) -> Self {
        RigidTransform::new(Quaternion::IDENTITY, t)
    }

    pub fn rotation(&self) -> Quaternion {
        self.q
    }

    pub fn translation_vector(&self) -> Vec3 {
        self.t
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.q.to_matrix()
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add3(self.q.rotate(p), self.t)
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, b: &RigidTransform) -> RigidTransform {
        RigidTransform::new(self.q * b.q, self.apply(b.t))
    }

    pub fn inverse(&self) -> RigidTransform {
        let qi = self.q.conjugate();
        RigidTransform::new(qi, scale3(qi.rotate(self.t), -1.0))
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform::IDENTITY
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn apply(a: &RigidTransform, p: Vec3) -> Vec3 {
    a.apply(p)
}

/// Full calibration: camera intrinsics plus the Lidar-to-camera extrinsic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub extrinsic: RigidTransform,
}

/// Continuous image coordinates in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }
}

impl fmt::Display for Pixel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.3}, {:.3})", self.u, self.v)
    }
}

/// Single-focal-length camera with USM distortion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub xi: f64,
}

impl CameraIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64, xi: f64) -> Result<Self, GeometryError> {
        let c = CameraIntrinsics { f, cx, cy, xi };
        c.validate()?;
        Ok(c)
    }

    pub fn pinhole(f: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::new(f, cx, cy, 0.0)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(GeometryError::InvalidIntrinsics("focal length must be positive"));
        }
        if !(0.0..=XI_MAX).contains(&self.xi) {
            return Err(GeometryError::InvalidIntrinsics("xi must lie in [0, 1.5]"));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("principal point must be finite"));
        }
        Ok(())
    }

    /// Checks the principal point lies within 4x the image bounds.
    pub fn validate_for_image(&self, width: usize, height: usize) -> Result<(), GeometryError> {
        self.validate()?;
        let (w, h) = (width as f64, height as f64);
        if self.cx.abs() > 4.0 * w || self.cy.abs() > 4.0 * h {
            return Err(GeometryError::InvalidIntrinsics(
                "principal point outside 4x the image bounds",
            ));
        }
        Ok(())
    }

    /// `K = [[f, 0, cx], [0, f, cy], [0, 0, 1]]`.
    pub fn matrix(&self) -> Mat3 {
        Mat3([[self.f, 0.0, self.cx], [0.0, self.f, self.cy], [0.0, 0.0, 1.0]])
    }

    /// Intrinsics of the same camera after resampling the image by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        CameraIntrinsics {
            f: self.f * scale,
            cx: self.cx * scale,
            cy: self.cy * scale,
            xi: self.xi,
        }
    }

    /// Projects a camera-frame point. `None` when the point lies outside the
    /// valid USM hemisphere (`s_z + xi <= 1e-9`).
    pub fn project(&self, xc: Vec3) -> Option<Pixel> {
        debug_assert!(xc.iter().all(|v| v.is_finite()), "non-finite point {xc:?}");
        let n = norm3(xc);
        if n == 0.0 {
            return None;
        }
        let s = scale3(xc, 1.0 / n);
        let den = s[2] + self.xi;
        if den <= PROJECTION_EPS {
            return None;
        }
        Some(Pixel::new(
            self.f * s[0] / den + self.cx,
            self.f * s[1] / den + self.cy,
        ))
    }

    /// Unit-norm camera-frame ray through `px`.
    pub fn unproject(&self, px: Pixel) -> Result<Vec3, GeometryError> {
        debug_assert!(px.u.is_finite() && px.v.is_finite());
        let mx = (px.u - self.cx) / self.f;
        let my = (px.v - self.cy) / self.f;
        let r2 = mx * mx + my * my;
        let radicand = 1.0 + (1.0 - self.xi * self.xi) * r2;
        if radicand < 0.0 {
            return Err(GeometryError::OutsideModelDomain { u: px.u, v: px.v });
        }
        let eta = (self.xi + radicand.sqrt()) / (1.0 + r2);
        let ray = [eta * mx, eta * my, eta - self.xi];
        let n = norm3(ray);
        Ok(scale3(ray, 1.0 / n))
    }
}

/// Projects a Lidar-frame point: `X_c = R p + t`, then the USM camera.
pub fn project_point(intr: &CameraIntrinsics, ext: &RigidTransform, p: Vec3) -> Option<Pixel> {
    intr.project(ext.apply(p))
}

/// Inverse of the USM projection: unit-norm ray through `px`.
pub fn undistort_pixel(intr: &CameraIntrinsics, px: Pixel) -> Result<Vec3, GeometryError> {
    intr.unproject(px)
}

/// Plain pinhole projection `K [R t] p`, used as a reference for `xi = 0`.
pub fn pinhole_project(intr: &CameraIntrinsics, ext: &RigidTransform, p: Vec3) -> Option<Pixel> {
    let xc = ext.apply(p);
    if xc[2] <= 0.0 {
        return None;
    }
    let h = intr.matrix().mul_vec(xc);
    Some(Pixel::new(h[0] / h[2], h[1] / h[2]))
}
