//! Fixtures and independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splatraj_core::kalman::{predict, update, MotionState, NoiseConfig, ObservationPair};
use splatraj_core::pose::Transformable;
use splatraj_core::render::{loss_gs, pose_photometric_gradient, registration_photometric_gradient, splat_render};
use splatraj_core::simulator::ObjectSource;
use splatraj_core::{simulate, Camera, IsotropicCloud, Pose, Quaternion, RegistrationTransform, SceneConfig, SimulatedScene, Vec3};

/// The desk scene shrunk to `size`×`size` pixels and `count` kernels.
pub fn reduced_desk(size: usize, count: usize, frames: usize) -> SceneConfig {
    let mut cfg = SceneConfig::desk();
    cfg.object = ObjectSource::Procedural {
        shape: "sphere".into(),
        count,
    };
    let s = size as f64;
    cfg.camera = Camera::new(s, Vector2::new(s / 2.0, s / 2.0), size, size, cfg.camera.extrinsic).unwrap();
    cfg.num_frames = frames;
    cfg
}

pub fn run_scene(cfg: &SceneConfig) -> SimulatedScene {
    simulate(cfg, Path::new(".")).unwrap()
}

/// Final state of the linear-Gaussian model given all observations, from the
/// stacked whitened least-squares problem over every state, solved directly.
pub fn batch_wls_final_state(
    x0: Vector2<f64>,
    p0: Matrix2<f64>,
    controls: &[f64],
    observations: &[(f64, f64)],
    dt: f64,
    noise: &NoiseConfig,
) -> Vector2<f64> {
    let steps = controls.len();
    let n = 2 * (steps + 1);
    let mut a = DMatrix::<f64>::zeros(2 + 4 * steps, n);
    let mut b = DVector::<f64>::zeros(2 + 4 * steps);
    let l_inv = p0.cholesky().unwrap().l().try_inverse().unwrap();
    let prior = l_inv * x0;
    for r in 0..2 {
        for c in 0..2 {
            a[(r, c)] = l_inv[(r, c)];
        }
        b[r] = prior[r];
    }
    let mut row = 2;
    let f = Matrix2::new(1.0, dt, 0.0, 1.0);
    let control_gain = Vector2::new(0.5 * dt * dt, dt);
    let q_sd = [noise.sigma_ds_sq.sqrt(), noise.sigma_v_sq.sqrt()];
    for (k, u) in controls.iter().enumerate() {
        for r in 0..2 {
            a[(row + r, 2 * (k + 1) + r)] = 1.0 / q_sd[r];
            for c in 0..2 {
                a[(row + r, 2 * k + c)] = -f[(r, c)] / q_sd[r];
            }
            b[row + r] = control_gain[r] * u / q_sd[r];
        }
        row += 2;
    }
    let r_sd = [noise.sigma_flow_sq.sqrt(), noise.sigma_learn_sq.sqrt()];
    for (k, &(zf, zl)) in observations.iter().enumerate() {
        for (r, z) in [zf, zl].into_iter().enumerate() {
            a[(row + r, 2 * (k + 1))] = 1.0 / r_sd[r];
            b[row + r] = z / r_sd[r];
        }
        row += 2;
    }
    let at = a.transpose();
    let sol = (&at * &a).lu().solve(&(&at * &b)).unwrap();
    Vector2::new(sol[n - 2], sol[n - 1])
}

/// Worst relative error of the recursive filter against the batch oracle over
/// `cases` random sequences of at most ten steps.
pub fn kalman_vs_batch(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let steps = rng.random_range(1..=10);
        let dt = rng.random_range(0.01..0.5);
        let noise = NoiseConfig {
            sigma_ds_sq: rng.random_range(0.01..1.0),
            sigma_v_sq: rng.random_range(0.01..1.0),
            sigma_flow_sq: rng.random_range(0.01..1.0),
            sigma_learn_sq: rng.random_range(0.01..1.0),
        };
        let x0 = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let c = rng.random_range(-0.5..0.5);
        let p0 = Matrix2::new(rng.random_range(0.5..2.0), c, c, rng.random_range(0.5..2.0));
        let controls: Vec<f64> = (0..steps).map(|_| rng.random_range(-2.0..2.0)).collect();
        let obs: Vec<(f64, f64)> = (0..steps)
            .map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let mut x = MotionState::new(x0.x, x0.y);
        let mut p = p0;
        for (u, z) in controls.iter().zip(&obs) {
            let (xp, pp) = predict(&x, &p, *u, dt, &noise).unwrap();
            (x, p) = update(&xp, &pp, &ObservationPair::new(z.0, z.1), &noise).unwrap();
        }
        let oracle = batch_wls_final_state(x0, p0, &controls, &obs, dt, &noise);
        let filter = Vector2::new(x.displacement, x.velocity);
        worst = worst.max((filter - oracle).norm() / oracle.norm().max(1e-12));
    }
    worst
}

/// Largest per-component relative error between an analytic gradient and
/// central differences. Components whose magnitude in both is below
/// `floor` times the largest component are compared absolutely against that
/// floor, since their relative error is dominated by rounding.
pub fn worst_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0_f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

fn normalize_rotation(params: &mut [f64]) {
    let n = params[..4].iter().map(|v| v * v).sum::<f64>().sqrt();
    params[..4].iter_mut().for_each(|v| *v /= n);
}

/// Photometric loss of raw parameters `[q, t]`; the rotation is that of
/// `q / |q|`, so off-unit quaternions are fine.
pub fn pose_loss(params: &[f64; 7], cloud: &IsotropicCloud, cam: &Camera, target: &splatraj_core::RenderedImage) -> f64 {
    let q = Quaternion::new(params[0], params[1], params[2], params[3]);
    let moved = cloud.transformed(&q.to_rotation_matrix(), &Vec3::new(params[4], params[5], params[6]), 1.0);
    loss_gs(&splat_render(&moved, cam), target, 0.2).unwrap()
}

pub fn registration_loss(
    params: &[f64; 8],
    cloud: &IsotropicCloud,
    cam: &Camera,
    target: &splatraj_core::RenderedImage,
) -> f64 {
    let q = Quaternion::new(params[0], params[1], params[2], params[3]);
    let moved = cloud.transformed(&q.to_rotation_matrix(), &Vec3::new(params[4], params[5], params[6]), params[7]);
    loss_gs(&splat_render(&moved, cam), target, 0.2).unwrap()
}

/// One randomized pose-gradient case against the desk scene: a frame, a
/// random perturbation of its true pose, analytic gradient versus central
/// differences with step `h`. Returns the worst relative error.
pub fn pose_gradient_case(scene: &SimulatedScene, rng: &mut ChaCha8Rng, h: f64, floor: f64) -> f64 {
    let cloud = scene.object.clone().into_isotropic().unwrap();
    let cam = &scene.config.camera;
    let frame = rng.random_range(0..scene.sequence.len());
    let target = &scene.sequence.images[frame];
    let truth = scene.sequence.poses[frame];
    let mut params = truth.to_params();
    for p in params.iter_mut() {
        *p += rng.random_range(-0.03..0.03);
    }
    normalize_rotation(&mut params);
    let pose = Pose::from_params(&params);
    let analytic = pose_photometric_gradient(&pose, &cloud, cam, target, 0.2).unwrap();
    let numeric: Vec<f64> = (0..7)
        .map(|i| {
            let mut plus = params;
            let mut minus = params;
            plus[i] += h;
            minus[i] -= h;
            (pose_loss(&plus, &cloud, cam, target) - pose_loss(&minus, &cloud, cam, target)) / (2.0 * h)
        })
        .collect();
    worst_relative_error(&analytic, &numeric, floor)
}

/// Registration-gradient analogue of [`pose_gradient_case`].
pub fn registration_gradient_case(scene: &SimulatedScene, rng: &mut ChaCha8Rng, h: f64, floor: f64) -> f64 {
    let cloud = scene.object.clone().into_isotropic().unwrap();
    let cam = &scene.config.camera;
    let target = &scene.sequence.images[0];
    let mut params = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    for p in params.iter_mut() {
        *p += rng.random_range(-0.03..0.03);
    }
    normalize_rotation(&mut params);
    let t = RegistrationTransform::new(
        Quaternion::new(params[0], params[1], params[2], params[3]),
        Vec3::new(params[4], params[5], params[6]),
        params[7],
    );
    let analytic = registration_photometric_gradient(&t, &cloud, cam, target, 0.2).unwrap();
    let numeric: Vec<f64> = (0..8)
        .map(|i| {
            let mut plus = params;
            let mut minus = params;
            plus[i] += h;
            minus[i] -= h;
            (registration_loss(&plus, &cloud, cam, target) - registration_loss(&minus, &cloud, cam, target)) / (2.0 * h)
        })
        .collect();
    worst_relative_error(&analytic, &numeric, floor)
}
