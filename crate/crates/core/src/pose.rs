//! Rigid transforms: quaternion rotations, poses, and the scaled
//! registration transform, plus their action on Gaussian clouds.
//!
//! Quaternions are scalar-first `(w, x, y, z)`, right-handed, acting on
//! column vectors. Rotations act about the world origin.

use std::io::{Read, Write};
use std::ops::Mul;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianCloud, IsotropicCloud, Vec3};

/// Allowed deviation of a pose quaternion's norm from 1.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(q: [f64; 4]) -> Self {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Exponential map of a rotation vector (axis scaled by angle in radians).
    pub fn from_rotation_vector(v: &Vec3) -> Self {
        let angle = v.norm();
        if angle < 1e-300 {
            return Self::IDENTITY;
        }
        let axis = v / angle;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, axis.x * s, axis.y * s, axis.z * s)
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        Self::from_rotation_vector(&(axis.normalize() * angle))
    }

    pub fn norm_squared(&self) -> f64 {
        self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn normalize(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rotation matrix of `q / |q|`; valid for any nonzero quaternion.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let n = self.norm_squared();
        quadratic_form(self) / n
    }

    /// Rotation matrix of `q / |q|` together with its partial derivatives
    /// with respect to `(w, x, y, z)`.
    pub fn rotation_matrix_jacobian(&self) -> (Matrix3<f64>, [Matrix3<f64>; 4]) {
        let n = self.norm_squared();
        let m = quadratic_form(self);
        let r = m / n;
        let Self { w, x, y, z } = *self;
        // Derivatives of the homogeneous quadratic form.
        let dm = [
            Matrix3::new(w, -z, y, z, w, -x, -y, x, w) * 2.0,
            Matrix3::new(x, y, z, y, -x, -w, z, w, -x) * 2.0,
            Matrix3::new(-y, x, w, x, y, z, -w, z, -y) * 2.0,
            Matrix3::new(-z, -w, x, w, -z, y, x, y, z) * 2.0,
        ];
        let q = [w, x, y, z];
        let mut jac = [Matrix3::zeros(); 4];
        for i in 0..4 {
            jac[i] = dm[i] / n - r * (2.0 * q[i] / n);
        }
        (r, jac)
    }
}

fn quadratic_form(q: &Quaternion) -> Matrix3<f64> {
    let Quaternion { w, x, y, z } = *q;
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

impl Mul for Quaternion {
    type Output = Quaternion;

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

/// A rigid transform `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Quaternion,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Quaternion, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::new(Quaternion::IDENTITY, Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Quaternion::IDENTITY, t)
    }

    /// Packs into `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_params(&self) -> [f64; 7] {
        let q = self.rotation;
        let t = self.translation;
        [q.w, q.x, q.y, q.z, t.x, t.y, t.z]
    }

    pub fn from_params(p: &[f64; 7]) -> Self {
        Self::new(Quaternion::new(p[0], p[1], p[2], p[3]), Vec3::new(p[4], p[5], p[6]))
    }

    pub fn normalized(&self) -> Self {
        Self::new(self.rotation.normalize(), self.translation)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.is_finite() || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite parameters".into()));
        }
        let n = self.rotation.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::InvalidPose(format!("quaternion norm {n} is not 1")));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation_matrix() * p + self.translation
    }

    /// `a ∘ b`: applies `b` first, then `a`.
    pub fn compose(&self, b: &Pose) -> Pose {
        let ra = self.rotation_matrix();
        Pose::new(
            (self.rotation * b.rotation).normalize(),
            ra * b.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let q = self.rotation.normalize().conjugate();
        let t = -(q.to_rotation_matrix() * self.translation);
        Pose::new(q, t)
    }
}

/// A similarity transform `x ↦ s R x + t` used to register the canonical
/// cloud to the first frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationTransform {
    pub rotation: Quaternion,
    pub translation: Vec3,
    pub scale: f64,
}

impl Default for RegistrationTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RegistrationTransform {
    pub fn new(rotation: Quaternion, translation: Vec3, scale: f64) -> Self {
        Self {
            rotation,
            translation,
            scale,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quaternion::IDENTITY, Vec3::zeros(), 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::InvalidTransform(format!("scale {} must be positive", self.scale)));
        }
        Pose::new(self.rotation, self.translation)
            .validate()
            .map_err(|e| Error::InvalidTransform(e.to_string()))
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

/// Clouds that can be moved by a similarity transform.
pub trait Transformable: Sized {
    fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3, scale: f64) -> Self;
}

impl Transformable for IsotropicCloud {
    fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3, scale: f64) -> Self {
        let mut out = self.clone();
        for k in &mut out.kernels {
            k.position = rotation * k.position * scale + translation;
            k.radius *= scale;
        }
        out
    }
}

impl Transformable for GaussianCloud {
    fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3, scale: f64) -> Self {
        let mut out = self.clone();
        for k in &mut out.kernels {
            k.position = rotation * k.position * scale + translation;
            k.covariance = rotation * k.covariance * rotation.transpose() * (scale * scale);
        }
        out
    }
}

/// `T ⊙ G` for a rigid pose.
pub fn apply_pose<C: Transformable>(pose: &Pose, cloud: &C) -> Result<C> {
    pose.validate()?;
    Ok(cloud.transformed(&pose.rotation_matrix(), &pose.translation, 1.0))
}

/// `T_reg ⊙ G` for a registration transform.
pub fn apply_registration<C: Transformable>(t: &RegistrationTransform, cloud: &C) -> Result<C> {
    t.validate()?;
    Ok(cloud.transformed(&t.rotation.to_rotation_matrix(), &t.translation, t.scale))
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Translation change between two consecutive poses.
pub fn pose_delta_translation(prev: &Pose, cur: &Pose) -> Vec3 {
    cur.translation - prev.translation
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    frame: usize,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    tx: f64,
    ty: f64,
    tz: f64,
}

/// Writes `frame,qw,qx,qy,qz,tx,ty,tz` rows.
pub fn write_pose_csv<W: Write>(writer: W, poses: &[Pose]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (frame, p) in poses.iter().enumerate() {
        let [qw, qx, qy, qz, tx, ty, tz] = p.to_params();
        w.serialize(PoseRow {
            frame,
            qw,
            qx,
            qy,
            qz,
            tx,
            ty,
            tz,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pose_csv<R: Read>(reader: R) -> Result<Vec<Pose>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows: Vec<PoseRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    rows.sort_by_key(|row| row.frame);
    Ok(rows
        .into_iter()
        .map(|row| Pose::from_params(&[row.qw, row.qx, row.qy, row.qz, row.tx, row.ty, row.tz]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::IsotropicKernel;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cloud(points: &[Vec3]) -> IsotropicCloud {
        IsotropicCloud::new(
            points
                .iter()
                .map(|p| IsotropicKernel::new(*p, 0.1, Vec3::new(0.2, 0.4, 0.6), 0.9).unwrap())
                .collect(),
        )
    }

    fn approx_pose(a: &Pose, b: &Pose, tol: f64) -> bool {
        let same_rot = (a.rotation_matrix() - b.rotation_matrix()).amax() < tol;
        same_rot && (a.translation - b.translation).amax() < tol
    }

    #[test]
    fn identity_and_translation() {
        let c = cloud(&[Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 0.0)]);
        assert_eq!(apply_pose(&Pose::identity(), &c).unwrap(), c);
        let moved = apply_pose(&Pose::from_translation(Vec3::new(1.0, 2.0, 3.0)), &c).unwrap();
        for (a, b) in moved.kernels.iter().zip(&c.kernels) {
            assert_eq!(a.position, b.position + Vec3::new(1.0, 2.0, 3.0));
            assert_eq!(a.radius, b.radius);
        }
    }

    #[test]
    fn quarter_turn_about_z() {
        let pose = Pose::new(Quaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2), Vec3::zeros());
        // Oracle: explicit rotation matrix for +90° about z.
        let oracle = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let p = Vec3::new(1.0, 0.0, 0.0);
        assert!((pose.transform_point(&p) - oracle * p).norm() < 1e-12);
        assert!((pose.transform_point(&p) - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn anisotropic_covariance_rotates() {
        let k = crate::gaussian::GaussianKernel::new(
            Vec3::zeros(),
            Matrix3::from_diagonal(&Vec3::new(4.0, 1.0, 1.0)),
            Vec3::zeros(),
            1.0,
        )
        .unwrap();
        let c = GaussianCloud::new(vec![k]);
        let pose = Pose::new(Quaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2), Vec3::zeros());
        let out = apply_pose(&pose, &c).unwrap();
        let expected = Matrix3::from_diagonal(&Vec3::new(1.0, 4.0, 1.0));
        assert!((out.kernels[0].covariance - expected).amax() < 1e-12);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        let pose = Pose::new(Quaternion::new(2.0, 0.0, 0.0, 0.0), Vec3::zeros());
        assert!(matches!(apply_pose(&pose, &cloud(&[Vec3::zeros()])), Err(Error::InvalidPose(_))));
    }

    #[test]
    fn registration_examples() {
        let c = cloud(&[Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 1.0, -1.0)]);
        let doubled = apply_registration(&RegistrationTransform::new(Quaternion::IDENTITY, Vec3::zeros(), 2.0), &c).unwrap();
        for (a, b) in doubled.kernels.iter().zip(&c.kernels) {
            assert_eq!(a.position, b.position * 2.0);
            assert_eq!(a.radius, b.radius * 2.0);
        }
        assert_eq!(apply_registration(&RegistrationTransform::identity(), &c).unwrap(), c);
        let half = RegistrationTransform::new(Quaternion::IDENTITY, Vec3::new(1.0, 0.0, 0.0), 0.5);
        let out = apply_registration(&half, &c).unwrap();
        assert_eq!(out.kernels[0].position, Vec3::new(2.0, 0.0, 0.0));
        let bad = RegistrationTransform::new(Quaternion::IDENTITY, Vec3::zeros(), 0.0);
        assert!(matches!(apply_registration(&bad, &c), Err(Error::InvalidTransform(_))));
    }

    #[test]
    fn compose_examples() {
        let p = Pose::new(Quaternion::from_axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.7), Vec3::new(0.3, -1.0, 2.0));
        assert!(approx_pose(&Pose::identity().compose(&p), &p, 1e-12));
        assert!(approx_pose(&p.compose(&p.inverse()), &Pose::identity(), 1e-9));

        let quarter = Pose::new(Quaternion::from_axis_angle(&Vec3::z(), FRAC_PI_2), Vec3::zeros());
        let half = quarter.compose(&quarter);
        let oracle = quarter.rotation_matrix() * quarter.rotation_matrix();
        assert!((half.rotation_matrix() - oracle).amax() < 1e-12);
        let expected = Pose::new(Quaternion::from_axis_angle(&Vec3::z(), PI), Vec3::zeros());
        assert!(approx_pose(&half, &expected, 1e-12));
    }

    #[test]
    fn delta_translation_examples() {
        let a = Pose::identity();
        assert_eq!(pose_delta_translation(&a, &a), Vec3::zeros());
        let b = Pose::from_translation(Vec3::new(0.0, -0.1, 0.0));
        assert_eq!(pose_delta_translation(&a, &b), Vec3::new(0.0, -0.1, 0.0));
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let q = Quaternion::new(0.8, -0.3, 0.45, 0.2);
        let (_, jac) = q.rotation_matrix_jacobian();
        let h = 1e-6;
        for i in 0..4 {
            let mut plus = q.to_array();
            let mut minus = q.to_array();
            plus[i] += h;
            minus[i] -= h;
            let fd = (Quaternion::from_array(plus).to_rotation_matrix() - Quaternion::from_array(minus).to_rotation_matrix())
                / (2.0 * h);
            assert!((fd - jac[i]).amax() < 1e-8, "component {i}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let poses = vec![
            Pose::identity(),
            Pose::new(Quaternion::from_axis_angle(&Vec3::x(), 0.3), Vec3::new(0.1, 0.2, 0.3)),
        ];
        let mut buf = Vec::new();
        write_pose_csv(&mut buf, &poses).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,qw,qx,qy,qz,tx,ty,tz\n"));
        assert_eq!(read_pose_csv(buf.as_slice()).unwrap(), poses);
    }

    fn arb_vec3(range: f64) -> impl Strategy<Value = Vec3> {
        (-range..range, -range..range, -range..range).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (arb_vec3(1.0), 0.0..PI, arb_vec3(5.0)).prop_filter_map("degenerate axis", |(axis, angle, t)| {
            (axis.norm() > 1e-3).then(|| Pose::new(Quaternion::from_axis_angle(&axis, angle), t))
        })
    }

    proptest! {
        #[test]
        fn rigid_motion_preserves_distances(pose in arb_pose(), pts in prop::collection::vec(arb_vec3(3.0), 2..8)) {
            let c = cloud(&pts);
            let moved = apply_pose(&pose, &c).unwrap();
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    let before = (c.kernels[i].position - c.kernels[j].position).norm();
                    let after = (moved.kernels[i].position - moved.kernels[j].position).norm();
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn registration_scales_distances(s in 0.1..5.0f64, pose in arb_pose(), pts in prop::collection::vec(arb_vec3(3.0), 2..6)) {
            let c = cloud(&pts);
            let t = RegistrationTransform::new(pose.rotation, pose.translation, s);
            let moved = apply_registration(&t, &c).unwrap();
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    let before = (c.kernels[i].position - c.kernels[j].position).norm();
                    let after = (moved.kernels[i].position - moved.kernels[j].position).norm();
                    prop_assert!((after - s * before).abs() <= 1e-9 * (s * before).max(1.0));
                }
            }
        }

        #[test]
        fn compose_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(approx_pose(&left, &right, 1e-9));
            prop_assert!(approx_pose(&Pose::identity().compose(&a), &a, 1e-12));
            prop_assert!(approx_pose(&a.compose(&Pose::identity()), &a, 1e-12));
        }

        #[test]
        fn double_cover(pose in arb_pose(), pts in prop::collection::vec(arb_vec3(2.0), 1..5)) {
            let q = pose.rotation;
            let neg = Pose::new(Quaternion::new(-q.w, -q.x, -q.y, -q.z), pose.translation);
            let c = cloud(&pts);
            let a = apply_pose(&pose, &c).unwrap();
            let b = apply_pose(&neg, &c).unwrap();
            for (ka, kb) in a.kernels.iter().zip(&b.kernels) {
                prop_assert!((ka.position - kb.position).norm() < 1e-12);
            }
        }
    }
}
