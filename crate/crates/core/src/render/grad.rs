//! Analytic gradients of the photometric loss with respect to pose and
//! registration parameters, chained through compositing and projection.

use nalgebra::Matrix3;

use super::loss::PhotometricTarget;
use super::splat::{backward, project_splats, rasterize};
use super::{Camera, RenderedImage};
use crate::error::{Error, Result};
use crate::gaussian::{IsotropicCloud, Vec3};
use crate::pose::{Pose, Quaternion, RegistrationTransform, Transformable};

/// Loss of a world-space cloud, with per-kernel world gradients.
#[derive(Debug, Clone)]
pub(crate) struct CloudEvaluation {
    pub loss: f64,
    /// `dL/dμ` per kernel, world frame. Empty when no gradient was requested.
    pub d_position: Vec<Vec3>,
    /// `dL/dR` per kernel (world radius).
    pub d_radius: Vec<f64>,
}

pub(crate) fn evaluate_cloud(
    cloud: &IsotropicCloud,
    cam: &Camera,
    target: &PhotometricTarget,
    want_grad: bool,
) -> Result<CloudEvaluation> {
    let splats = project_splats(cloud, cam);
    let (image, touches) = rasterize(&splats, cam.width, cam.height, want_grad);
    let (loss, grad_rgb) = target.evaluate(&image, want_grad)?;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure("non-finite photometric loss".into()));
    }
    let mut d_position = Vec::new();
    let mut d_radius = Vec::new();
    if let Some(grad_rgb) = grad_rgb {
        d_position = vec![Vec3::zeros(); cloud.len()];
        d_radius = vec![0.0; cloud.len()];
        let screen = backward(&splats, &touches, cam.width, &grad_rgb);
        let cam_rot_t = cam.extrinsic.rotation_matrix().transpose();
        let f = cam.focal;
        for (s, g) in splats.iter().zip(screen) {
            let p = s.cam_pos;
            let inv_z = 1.0 / p.z;
            // u = f x/z + cx, v = f y/z + cy, r = f R/z
            let d_cam = Vec3::new(
                g.center.x * f * inv_z,
                g.center.y * f * inv_z,
                -(g.center.x * f * p.x + g.center.y * f * p.y + g.radius_px * f * s.world_radius) * inv_z * inv_z,
            );
            d_position[s.index] = cam_rot_t * d_cam;
            d_radius[s.index] = g.radius_px * f * inv_z;
        }
        let finite = d_position.iter().all(|v| v.iter().all(|x| x.is_finite())) && d_radius.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NumericalFailure("non-finite gradient".into()));
        }
    }
    Ok(CloudEvaluation {
        loss,

        d_position,
        d_radius,
    })
}

/// Photometric loss of `cloud` moved by `x ↦ s R(q/|q|) x + t`, with the
/// gradient with respect to `(q, t, s)` when requested.
#[derive(Debug, Clone)]
pub(crate) struct TransformEvaluation {
    pub loss: f64,
    pub d_rotation: [f64; 4],
    pub d_translation: Vec3,
    pub d_scale: f64,
}

pub(crate) fn evaluate_transform(
    cloud: &IsotropicCloud,
    rotation: &Quaternion,
    translation: &Vec3,
    scale: f64,
    cam: &Camera,
    target: &PhotometricTarget,
    want_grad: bool,
) -> Result<TransformEvaluation> {
    let (rot, jac): (Matrix3<f64>, [Matrix3<f64>; 4]) = rotation.rotation_matrix_jacobian();
    let moved = cloud.transformed(&rot, translation, scale);
    let eval = evaluate_cloud(&moved, cam, target, want_grad)?;
    let mut out = TransformEvaluation {
        loss: eval.loss,
        d_rotation: [0.0; 4],
        d_translation: Vec3::zeros(),
        d_scale: 0.0,
    };
    if want_grad {
        for (k, (gp, gr)) in cloud.kernels.iter().zip(eval.d_position.iter().zip(&eval.d_radius)) {
            out.d_translation += gp;
            for (i, j) in jac.iter().enumerate() {
                out.d_rotation[i] += gp.dot(&(j * k.position)) * scale;
            }
            out.d_scale += gp.dot(&(rot * k.position)) + gr * k.radius;
        }
    }
    Ok(out)
}

/// Gradient of `loss_gs(render(pose ⊙ cloud), target)` with respect to
/// `[qw, qx, qy, qz, tx, ty, tz]`.
pub fn pose_photometric_gradient(
    pose: &Pose,
    cloud: &IsotropicCloud,
    cam: &Camera,
    target: &RenderedImage,
    lambda_dssim: f64,
) -> Result<[f64; 7]> {
    pose.validate()?;
    let target = PhotometricTarget::new(target.clone(), lambda_dssim)?;
    let e = evaluate_transform(cloud, &pose.rotation, &pose.translation, 1.0, cam, &target, true)?;
    let [a, b, c, d] = e.d_rotation;
    let t = e.d_translation;
    Ok([a, b, c, d, t.x, t.y, t.z])
}

/// Gradient with respect to `[qw, qx, qy, qz, tx, ty, tz, s]`.
pub fn registration_photometric_gradient(
    transform: &RegistrationTransform,
    cloud: &IsotropicCloud,
    cam: &Camera,
    target: &RenderedImage,
    lambda_dssim: f64,
) -> Result<[f64; 8]> {
    transform.validate()?;
    let target = PhotometricTarget::new(target.clone(), lambda_dssim)?;
    let e = evaluate_transform(
        cloud,
        &transform.rotation,
        &transform.translation,
        transform.scale,
        cam,
        &target,
        true,
    )?;
    let [a, b, c, d] = e.d_rotation;
    let t = e.d_translation;
    Ok([a, b, c, d, t.x, t.y, t.z, e.d_scale])
}
