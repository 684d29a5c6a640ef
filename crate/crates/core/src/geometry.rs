//! Rigid transforms, rotation parameterizations and camera projection models.
//!
//! Conventions used throughout the crate:
//!
//! * A [`Pose`] maps points from its local frame into its parent frame,
//!   `p_parent = R * p_local + t`. A body pose in the world is therefore
//!   `world_T_body`, and a camera extrinsic is `body_T_cam`.
//! * Camera frames look down `+z`, with `x` to the right and `y` down.
//! * Rotation perturbations are applied on the right, `R <- R * Exp(d)`, and
//!   translation perturbations are additive.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, Unit, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("point is outside the field of view ({angle:.4} rad >= {limit:.4} rad)")]
    OutOfFov { angle: f64, limit: f64 },
    #[error("pixel implies a ray outside the model domain ({angle:.4} rad >= {limit:.4} rad)")]
    OutOfModel { angle: f64, limit: f64 },
    #[error("scale factor must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsic(String),
    #[error("a rig needs at least two cameras, got {0}")]
    TooFewCameras(usize),
    #[error("camera index {0} out of range")]
    UnknownCamera(usize),
}

/// Skew-symmetric cross-product matrix, `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from an axis-angle vector to a unit quaternion.
pub fn so3_exp(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta_sq = v.norm_squared();
    let theta = theta_sq.sqrt();
    let (w, k) = if theta < 1e-8 {
        (1.0 - theta_sq / 8.0, 0.5 - theta_sq / 48.0)
    } else {
        ((0.5 * theta).cos(), (0.5 * theta).sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * v.x, k * v.y, k * v.z))
}

/// Logarithm map from a unit quaternion to an axis-angle vector with angle in `[0, pi]`.
///
/// At exactly `pi` the axis is ambiguous; the returned axis has its largest
/// absolute component positive (first such component on ties).
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = q.quaternion();
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n = v.norm();
    if n < 1e-12 {
        return v * (2.0 / w);
    }
    let angle = 2.0 * n.atan2(w);
    let mut axis = v / n;
    if w == 0.0 {
        let mut best = 0;
        for i in 1..3 {
            if axis[i].abs() > axis[best].abs() {
                best = i;
            }
        }
        if axis[best] < 0.0 {
            axis = -axis;
        }
    }
    axis * angle
}

/// Rotation angle of a unit quaternion in `[0, pi]`.
pub fn rotation_angle(q: &UnitQuaternion<f64>) -> f64 {
    so3_log(q).norm()
}

/// Rigid transform stored as a unit quaternion plus translation (meters).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds a pose from a rotation matrix; the matrix is projected onto SO(3).
    pub fn from_matrix_parts(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// Homogeneous 4x4 matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rotation = self.rotation.inverse();
        Pose {
            rotation,
            translation: -(rotation * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Applies a right perturbation: rotation `R * Exp(dr)`, translation `t + dt`.
    pub fn retract(&self, dr: &Vector3<f64>, dt: &Vector3<f64>) -> Pose {
        let mut rotation = self.rotation * so3_exp(dr);
        rotation.renormalize();
        Pose {
            rotation,
            translation: self.translation + dt,
        }
    }

    /// Inverse of [`Pose::retract`] about `base`: returns `(log(R_base^T R), t - t_base)`.
    pub fn local_difference(&self, base: &Pose) -> (Vector3<f64>, Vector3<f64>) {
        (
            so3_log(&(base.rotation.inverse() * self.rotation)),
            self.translation - base.translation,
        )
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.rotation.quaternion().norm()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;
    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.rotation.quaternion();
        write!(
            f,
            "t=({:.4}, {:.4}, {:.4}) q=({:.4}, {:.4}, {:.4}, {:.4})",
            self.translation.x, self.translation.y, self.translation.z, q.i, q.j, q.k, q.w
        )
    }
}

pub fn se3_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn se3_inverse(a: &Pose) -> Pose {
    a.inverse()
}

/// Pose of a camera expressed in the body frame (`body_T_cam`).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CameraExtrinsic {
    pub cam_in_body: Pose,
}

impl CameraExtrinsic {
    pub fn new(cam_in_body: Pose) -> Self {
        Self { cam_in_body }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CameraModel {
    Pinhole,
    /// Equidistant fisheye, radial distance `r = f * theta`.
    Equidistant,
}

impl CameraModel {
    pub fn name(&self) -> &'static str {
        match self {
            CameraModel::Pinhole => "pinhole",
            CameraModel::Equidistant => "equidistant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pinhole" => Some(CameraModel::Pinhole),
            "equidistant" | "fisheye" => Some(CameraModel::Equidistant),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsic {
    pub model: CameraModel,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Maximum angle between a visible ray and the optical axis (radians).
    pub fov_limit: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsic {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        let half_w = (width as f64 * 0.5 / fx).atan();
        let half_h = (height as f64 * 0.5 / fy).atan();
        // Diagonal half-angle bounds every in-image ray.
        let fov = (half_w.tan().hypot(half_h.tan())).atan().min(PI / 2.0 - 1e-6);
        Self {
            model: CameraModel::Pinhole,
            fx,
            fy,
            cx,
            cy,
            fov_limit: fov,
            width,
            height,
        }
    }

    pub fn equidistant(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        fov_limit: f64,
        width: u32,
        height: u32,
    ) -> Self {
        Self {
            model: CameraModel::Equidistant,
            fx,
            fy,
            cx,
            cy,
            fov_limit,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |m: &str| Err(GeometryError::InvalidIntrinsic(m.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return bad("focal lengths must be positive");
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return bad("principal point must be finite");
        }
        match self.model {
            CameraModel::Pinhole if !(self.fov_limit > 0.0 && self.fov_limit < PI / 2.0) => {
                bad("pinhole fov limit must lie in (0, pi/2)")
            }
            CameraModel::Equidistant if !(self.fov_limit > 0.0 && self.fov_limit <= PI) => {
                bad("fisheye fov limit must lie in (0, pi]")
            }
            _ if self.width == 0 || self.height == 0 => bad("image size must be non-zero"),
            _ => Ok(()),
        }
    }

    /// Mean focal length, used to convert pixel thresholds to angles.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }
}

/// Projects a point in the camera frame to pixel coordinates.
pub fn project(point: &Vector3<f64>, intr: &CameraIntrinsic) -> Result<Vector2<f64>, GeometryError> {
    let rho = point.x.hypot(point.y);
    let angle = rho.atan2(point.z);
    match intr.model {
        CameraModel::Pinhole => {
            if point.z <= 0.0 {
                return Err(GeometryError::BehindCamera(point.z));
            }
            if angle >= intr.fov_limit {
                return Err(GeometryError::OutOfFov {
                    angle,
                    limit: intr.fov_limit,
                });
            }
            Ok(Vector2::new(
                intr.fx * point.x / point.z + intr.cx,
                intr.fy * point.y / point.z + intr.cy,
            ))
        }
        CameraModel::Equidistant => {
            if angle >= intr.fov_limit {
                return Err(GeometryError::OutOfFov {
                    angle,
                    limit: intr.fov_limit,
                });
            }
            if rho == 0.0 {
                if point.z <= 0.0 {
                    return Err(GeometryError::BehindCamera(point.z));
                }
                return Ok(Vector2::new(intr.cx, intr.cy));
            }
            let k = angle / rho;
            Ok(Vector2::new(
                intr.fx * k * point.x + intr.cx,
                intr.fy * k * point.y + intr.cy,
            ))
        }
    }
}

/// Back-projects a pixel to a unit-norm ray in the camera frame.
pub fn unproject(
    pixel: &Vector2<f64>,
    intr: &CameraIntrinsic,
) -> Result<Unit<Vector3<f64>>, GeometryError> {
    let mx = (pixel.x - intr.cx) / intr.fx;
    let my = (pixel.y - intr.cy) / intr.fy;
    match intr.model {
        CameraModel::Pinhole => Ok(Unit::new_normalize(Vector3::new(mx, my, 1.0))),
        CameraModel::Equidistant => {
            let theta = mx.hypot(my);
            if theta >= intr.fov_limit {
                return Err(GeometryError::OutOfModel {
                    angle: theta,
                    limit: intr.fov_limit,
                });
            }
            if theta == 0.0 {
                return Ok(Vector3::z_axis());
            }
            let s = theta.sin() / theta;
            Ok(Unit::new_normalize(Vector3::new(
                mx * s,
                my * s,
                theta.cos(),
            )))
        }
    }
}

/// Body pose implied by a camera pose, its extrinsic and a scale factor:
/// rotation `R r^T`, translation `-R r^T t + s T`.
pub fn body_pose_from_camera(
    cam_pose: &Pose,
    ext: &CameraExtrinsic,
    scale: f64,
) -> Result<Pose, GeometryError> {
    if !(scale > 0.0) {
        return Err(GeometryError::NonPositiveScale(scale));
    }
    let r_ext_t = ext.cam_in_body.rotation.inverse();
    let mut rotation = cam_pose.rotation * r_ext_t;
    rotation.renormalize();
    let translation =
        -(rotation * ext.cam_in_body.translation) + cam_pose.translation * scale;
    Ok(Pose {
        rotation,
        translation,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsic: CameraIntrinsic,
    pub extrinsic: CameraExtrinsic,
}

/// Static rig geometry: ordered cameras with intrinsics and extrinsics.
#[derive(Clone, Debug, PartialEq)]
pub struct RigConfig {
    cameras: Vec<Camera>,
}

impl RigConfig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, GeometryError> {
        if cameras.len() < 2 {
            return Err(GeometryError::TooFewCameras(cameras.len()));
        }
        for cam in &cameras {
            cam.intrinsic.validate()?;
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, idx: usize) -> &Camera {
        &self.cameras[idx]
    }

    pub fn extrinsics(&self) -> Vec<CameraExtrinsic> {
        self.cameras.iter().map(|c| c.extrinsic).collect()
    }

    /// Rig restricted to the given camera indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, GeometryError> {
        let mut cams = Vec::with_capacity(indices.len());
        for &i in indices {
            cams.push(*self.cameras.get(i).ok_or(GeometryError::UnknownCamera(i))?);
        }
        Self::new(cams)
    }

    /// Four-camera vehicle rig: a forward pinhole stereo pair plus two
    /// side-looking equidistant fisheyes. Body axes: x forward, y left, z up.
    pub fn vehicle_four_camera() -> Self {
        let pin = CameraIntrinsic::pinhole(320.0, 320.0, 320.0, 240.0, 640, 480);
        let fish =
            CameraIntrinsic::equidistant(240.0, 240.0, 320.0, 320.0, 1.3, 640, 640);
        let cams = vec![
            Camera {
                intrinsic: pin,
                extrinsic: CameraExtrinsic::new(Pose::new(
                    look_rotation(&Vector3::x()),
                    Vector3::new(1.2, 0.3, 0.0),
                )),
            },
            Camera {
                intrinsic: pin,
                extrinsic: CameraExtrinsic::new(Pose::new(
                    look_rotation(&Vector3::x()),
                    Vector3::new(1.2, -0.3, 0.0),
                )),
            },
            Camera {
                intrinsic: fish,
                extrinsic: CameraExtrinsic::new(Pose::new(
                    look_rotation(&Vector3::y()),
                    Vector3::new(0.0, 0.8, 0.0),
                )),
            },
            Camera {
                intrinsic: fish,
                extrinsic: CameraExtrinsic::new(Pose::new(
                    look_rotation(&-Vector3::y()),
                    Vector3::new(-0.2, -0.8, 0.0),
                )),
            },
        ];
        Self::new(cams).expect("built-in rig is valid")
    }
}

/// Closed-form least-squares alignment `dst ~ s * R * src + t`.
///
/// With `with_scale = false` the scale is fixed to 1. Returns `None` for
/// fewer than three pairs or a source set with no spread.
pub fn umeyama_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Option<(Pose, f64)> {
    let n = src.len().min(dst.len());
    if n < 3 {
        return None;
    }
    let inv_n = 1.0 / n as f64;
    let mu_s = src[..n].iter().sum::<Vector3<f64>>() * inv_n;
    let mu_d = dst[..n].iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (a, b) in src[..n].iter().zip(&dst[..n]) {
        let (ca, cb) = (a - mu_s, b - mu_d);
        cov += cb * ca.transpose();
        var_s += ca.norm_squared();
    }
    cov *= inv_n;
    var_s *= inv_n;
    if var_s <= 0.0 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = if (u.determinant() * vt.determinant()) < 0.0 { -1.0 } else { 1.0 };
    let sign = Vector3::new(1.0, 1.0, d);
    let r = u * Matrix3::from_diagonal(&sign) * vt;
    let scale = if with_scale {
        svd.singular_values.component_mul(&sign).sum() / var_s
    } else {
        1.0
    };
    let t = mu_d - r * mu_s * scale;
    Some((Pose::from_matrix_parts(&r, t), scale))
}

/// Rotation of a camera whose optical axis points along `forward` (body frame)
/// with image `y` pointing down (`-z` of the body).
pub fn look_rotation(forward: &Vector3<f64>) -> UnitQuaternion<f64> {
    let z = forward.normalize();
    let down = -Vector3::z();
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let m = Matrix3::from_columns(&[x, y, z]);
    UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rz(deg: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), deg.to_radians())
    }

    fn rx(deg: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::x_axis(), deg.to_radians())
    }

    fn pose_close(a: &Pose, b: &Pose, tol: f64) -> bool {
        a.rotation.angle_to(&b.rotation) < tol && (a.translation - b.translation).norm() < tol
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let v = Vector3::new(
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        );
        let v = if v.norm() > 3.1 { v * (3.1 / v.norm()) } else { v };
        Pose::new(
            so3_exp(&v),
            Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ),
        )
    }

    #[test]
    fn compose_identity_and_rotations() {
        let p = Pose::new(rx(20.0), Vector3::new(1.0, 2.0, 3.0));
        assert!(pose_close(&(Pose::identity() * p), &p, 1e-15));
        let r = Pose::from_rotation(rz(90.0)) * Pose::from_rotation(rz(90.0));
        assert!(pose_close(&r, &Pose::from_rotation(rz(180.0)), 1e-12));
        assert_eq!(r.translation, Vector3::zeros());
        assert!(pose_close(&(p * p.inverse()), &Pose::identity(), 1e-12));
    }

    #[test]
    fn inverse_examples() {
        assert!(pose_close(&Pose::identity().inverse(), &Pose::identity(), 0.0 + 1e-300));
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(p.inverse().translation, Vector3::new(-1.0, -2.0, -3.0));
        let q = Pose::new(rx(33.0) * rz(-71.0), Vector3::new(0.5, -4.0, 2.0));
        assert!(pose_close(&q.inverse().inverse(), &q, 1e-12));
    }

    #[test]
    fn pose_laws_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let (a, b, c) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
            assert!(pose_close(&((a * b) * c), &(a * (b * c)), 1e-10));
            assert!(pose_close(&(a * b).inverse(), &(b.inverse() * a.inverse()), 1e-10));
            assert!(((a * b).quaternion_norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn log_exp_examples() {
        assert_eq!(so3_log(&UnitQuaternion::identity()), Vector3::zeros());
        let q = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        assert!(q.angle_to(&rz(90.0)) < 1e-12);
    }

    #[test]
    fn log_exp_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let v = axis * rng.random_range(0.0..PI - 1e-6);
            worst = worst.max((so3_log(&so3_exp(&v)) - v).norm());
            let q = so3_exp(&v);
            worst = worst.max(so3_exp(&so3_log(&q)).angle_to(&q));
        }
        assert!(worst < 1e-9, "worst round-trip error {worst}");
    }

    #[test]
    fn log_at_pi_uses_positive_dominant_axis() {
        for axis in [Vector3::x(), -Vector3::x(), Vector3::new(0.0, -0.6, 0.8), Vector3::new(0.0, -0.8, 0.6)] {
            let q = UnitQuaternion::from_quaternion(Quaternion::new(0.0, axis.x, axis.y, axis.z));
            let v = so3_log(&q);
            assert_relative_eq!(v.norm(), PI, epsilon = 1e-12);
            let dominant = v.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(dominant > 0.0);
            assert!(so3_exp(&v).angle_to(&q) < 1e-12);
        }
    }

    #[test]
    fn project_examples() {
        let intr = CameraIntrinsic::pinhole(100.0, 100.0, 50.0, 50.0, 100, 100);
        assert_eq!(project(&Vector3::new(0.0, 0.0, 1.0), &intr).unwrap(), Vector2::new(50.0, 50.0));
        let wide = CameraIntrinsic { fov_limit: 1.5, ..intr };
        assert_eq!(project(&Vector3::new(1.0, 0.0, 2.0), &wide).unwrap(), Vector2::new(100.0, 50.0));
        let fish = CameraIntrinsic::equidistant(100.0, 100.0, 0.0, 0.0, PI, 200, 200);
        let ray = Vector3::new((PI / 4.0).sin(), 0.0, (PI / 4.0).cos());
        let px = project(&ray, &fish).unwrap();
        assert_relative_eq!(px.x, 78.539816, epsilon = 1e-5);
        assert_relative_eq!(px.y, 0.0, epsilon = 1e-12);
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &intr),
            Err(GeometryError::BehindCamera(_))
        ));
        assert!(matches!(
            project(&Vector3::new(5.0, 0.0, 1.0), &intr),
            Err(GeometryError::OutOfFov { .. })
        ));
    }

    #[test]
    fn unproject_examples() {
        let intr = CameraIntrinsic::pinhole(100.0, 100.0, 50.0, 50.0, 100, 100);
        let r = unproject(&Vector2::new(50.0, 50.0), &intr).unwrap();
        assert_relative_eq!(r.into_inner(), Vector3::z(), epsilon = 1e-15);
        let fish = CameraIntrinsic::equidistant(100.0, 100.0, 0.0, 0.0, PI, 200, 200);
        let ray = unproject(&Vector2::new(78.5398, 0.0), &fish).unwrap();
        assert_relative_eq!(ray.z.acos(), PI / 4.0, epsilon = 1e-6);
        let narrow = CameraIntrinsic::equidistant(100.0, 100.0, 0.0, 0.0, 0.5, 200, 200);
        assert!(matches!(
            unproject(&Vector2::new(78.5398, 0.0), &narrow),
            Err(GeometryError::OutOfModel { .. })
        ));
    }

    fn round_trip_worst(intr: &CameraIntrinsic, seed: u64, n: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..n {
            // Sample in-FoV rays uniformly in angle and azimuth.
            let theta = rng.random_range(0.0..intr.fov_limit * 0.999);
            let phi = rng.random_range(-PI..PI);
            let ray = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let Ok(px) = project(&ray, intr) else { continue };
            let back = unproject(&px, intr).unwrap();
            let depth = rng.random_range(0.1..50.0);
            let px2 = project(&(back.into_inner() * depth), intr).unwrap();
            worst = worst.max((px2 - px).norm());
        }
        worst
    }

    #[test]
    fn project_unproject_round_trip_both_models() {
        let pin = CameraIntrinsic::pinhole(320.0, 310.0, 320.0, 240.0, 640, 480);
        let fish = CameraIntrinsic::equidistant(240.0, 245.0, 320.0, 320.0, 1.55, 640, 640);
        assert!(round_trip_worst(&pin, 1, 10_000) < 1e-6);
        assert!(round_trip_worst(&fish, 2, 10_000) < 1e-6);
    }

    fn dense_body_oracle(cam: &Pose, ext: &Pose, s: f64) -> Matrix4<f64> {
        let mut scaled = cam.to_matrix();
        for i in 0..3 {
            scaled[(i, 3)] *= s;
        }
        let r = ext.rotation_matrix();
        let mut inv = Matrix4::identity();
        inv.fixed_view_mut::<3, 3>(0, 0).copy_from(&r.transpose());
        inv.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(-(r.transpose() * ext.translation)));
        scaled * inv
    }

    #[test]
    fn body_pose_examples() {
        let cam = Pose::new(rx(30.0), Vector3::new(0.0, 1.0, 0.0));
        let id = CameraExtrinsic::default();
        assert!(pose_close(&body_pose_from_camera(&cam, &id, 1.0).unwrap(), &cam, 1e-15));

        let ext = CameraExtrinsic::new(Pose::new(rz(90.0), Vector3::new(1.0, 0.0, 0.0)));
        let b1 = body_pose_from_camera(&cam, &ext, 1.0).unwrap();
        let b2 = body_pose_from_camera(&cam, &ext, 2.0).unwrap();
        assert_eq!(b1.rotation, b2.rotation);
        assert_relative_eq!(b2.translation - b1.translation, cam.translation, epsilon = 1e-15);

        let oracle = dense_body_oracle(&cam, &ext.cam_in_body, 2.0);
        assert!((b2.to_matrix() - oracle).abs().max() < 1e-12);
        assert!(matches!(
            body_pose_from_camera(&cam, &ext, 0.0),
            Err(GeometryError::NonPositiveScale(_))
        ));
    }

    #[test]
    fn body_rotation_independent_of_scale() {
        let cam = Pose::new(rx(12.0) * rz(40.0), Vector3::new(3.0, -1.0, 0.5));
        let ext = CameraExtrinsic::new(Pose::new(rz(-35.0), Vector3::new(0.2, 0.7, -0.1)));
        let rots: Vec<_> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&s| body_pose_from_camera(&cam, &ext, s).unwrap().rotation)
            .collect();
        assert_eq!(rots[0], rots[1]);
        assert_eq!(rots[1], rots[2]);
    }

    #[test]
    fn look_rotation_points_optical_axis() {
        let q = look_rotation(&Vector3::y());
        assert_relative_eq!(q * Vector3::z(), Vector3::y(), epsilon = 1e-12);
        assert_relative_eq!(q * Vector3::y(), -Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn rig_requires_two_cameras() {
        let rig = RigConfig::vehicle_four_camera();
        assert_eq!(rig.len(), 4);
        assert!(matches!(rig.subset(&[0]), Err(GeometryError::TooFewCameras(1))));
        assert_eq!(rig.subset(&[0, 1]).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn body_pose_with_identity_extrinsic_is_identity_map(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
        ) {
            let p = Pose::new(so3_exp(&Vector3::new(ax, ay, az)), Vector3::new(tx, ty, tz));
            let b = body_pose_from_camera(&p, &CameraExtrinsic::default(), 1.0).unwrap();
            prop_assert!(pose_close(&b, &p, 1e-14));
        }
    }
}
