//! Trajectory recovery: register the canonical cloud to the first frame,
//! then track every later frame by minimizing
//! `λ₁·L_GS + λ₂·L_Acc + λ₃·L_Smooth` over the raw pose parameters, with a
//! displacement-adaptive learning-rate schedule and Kalman re-anchoring of
//! the centroid after each frame.
//!
//! Frame poses act on the scaled canonical cloud `s·G0`; the registration
//! rotation and translation become the frame-0 pose. Physics works on the
//! radius-weighted centroid `c = R(q)·(s·c0) + t`.
//!
//! Both auxiliary terms are made dimensionless by the object diameter `D`:
//! `L_Acc` penalizes the change of consecutive second differences of the
//! centroid, `dt⁴·‖Δa‖² / D²`, and `L_Smooth` is `‖Δc − Δc_flow‖² / D²`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::dsa::{lr_at_iteration, DisplacementReference, DsaConfig};
use crate::error::{invalid, Error, Result};
use crate::gaussian::{centroid, isotropize, prune, CloudData, IsotropicCloud, PruneConfig, Vec3};
use crate::kalman::{backproject_flow, write_trace_csv, FusionStep, KalmanFusion, NoiseConfig, INITIAL_VELOCITY_VAR};
use crate::physics::{acc_consistency_loss_with_grad, finite_diff_acceleration, AccLossForm, PhysicsConfig};
use crate::pose::{apply_registration, write_pose_csv, Pose, Quaternion, RegistrationTransform, Transformable};
use crate::render::grad::evaluate_transform;
use crate::render::{project, splat_render, Camera, LossWeights, Mask, PhotometricTarget, RenderedImage};

/// Where the Kalman control input comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlInput {
    /// The most recent finite-difference acceleration of the recovered centroids.
    #[default]
    Latest,
    /// Running mean of the gravity-parallel part of all estimates so far.
    GravityMean,
    /// Always the configured gravity vector.
    Configured,
}

/// Switches for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoDsa,
    NoLacc,
    NoKalman,
    NoSmooth,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-dsa" => Ok(Self::NoDsa),
            "no-lacc" => Ok(Self::NoLacc),
            "no-kalman" => Ok(Self::NoKalman),
            "no-smooth" => Ok(Self::NoSmooth),
            other => Err(invalid(format!("unknown ablation mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NoDsa => "no-dsa",
            Self::NoLacc => "no-lacc",
            Self::NoKalman => "no-kalman",
            Self::NoSmooth => "no-smooth",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub loss_weights: LossWeights,
    pub dsa: DsaConfig,
    pub noise: NoiseConfig,
    /// Overrides the scene's physics when set.
    pub physics: Option<PhysicsConfig>,
    pub registration_lr: f64,
    pub registration_iters: usize,
    pub kalman_enabled: bool,
    pub literal_lacc: bool,
    pub dsa_enabled: bool,
    pub lacc_enabled: bool,
    pub smooth_enabled: bool,
    /// Flow noise in pixels; when set, the flow observation variance is
    /// derived from it at the object's depth instead of `noise.sigma_flow_sq`.
    pub flow_noise_px: Option<f64>,
    pub control_input: ControlInput,
    /// Optional density control applied to anisotropic input clouds.
    pub prune: Option<PruneConfig>,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            loss_weights: LossWeights::default(),
            dsa: DsaConfig::default(),
            noise: NoiseConfig::default(),
            physics: None,
            registration_lr: 5.0e-5,
            registration_iters: 10_000,
            kalman_enabled: true,
            literal_lacc: false,
            dsa_enabled: true,
            lacc_enabled: true,
            smooth_enabled: true,
            flow_noise_px: None,
            control_input: ControlInput::default(),
            prune: None,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        self.dsa.validate()?;
        self.noise.validate()?;
        if let Some(p) = &self.physics {
            p.validate()?;
        }
        if !(self.registration_lr > 0.0 && self.registration_lr.is_finite()) {
            return Err(invalid("registration_lr must be positive"));
        }
        if let Some(px) = self.flow_noise_px {
            if !(px >= 0.0 && px.is_finite()) {
                return Err(invalid("flow_noise_px must be finite and nonnegative"));
            }
        }
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        Ok(())
    }

    pub fn with_ablation(mut self, mode: Ablation) -> Self {
        match mode {
            Ablation::NoDsa => self.dsa_enabled = false,
            Ablation::NoLacc => self.lacc_enabled = false,
            Ablation::NoKalman => self.kalman_enabled = false,
            Ablation::NoSmooth => self.smooth_enabled = false,
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn acc_form(&self) -> AccLossForm {
        if self.literal_lacc {
            AccLossForm::Literal
        } else {
            AccLossForm::Change
        }
    }
}

/// Bias-corrected adaptive moment estimation.
#[derive(Debug, Clone)]
pub struct Adam<const N: usize> {
    m: [f64; N],
    v: [f64; N],
    steps: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<const N: usize> Default for Adam<N> {
    fn default() -> Self {
        Self {
            m: [0.0; N],
            v: [0.0; N],
            steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl<const N: usize> Adam<N> {
    pub fn step(&mut self, params: &mut [f64; N], grad: &[f64; N], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..N {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Squared distance between the learned and the flow displacement.
pub fn smooth_loss(learned_delta: &Vec3, flow_delta: &Vec3) -> f64 {
    (learned_delta - flow_delta).norm_squared()
}

fn normalize_params(p: &mut [f64]) {
    let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2] + p[3] * p[3]).sqrt();
    if n > 0.0 {
        p[..4].iter_mut().for_each(|v| *v /= n);
    }
}

/// Alpha mass and alpha-weighted pixel centroid of an image.
fn alpha_moments(img: &RenderedImage) -> (f64, Vector2<f64>) {
    let mut mass = 0.0;
    let mut acc = Vector2::zeros();
    for y in 0..img.height {
        for x in 0..img.width {
            let a = img.alpha[y * img.width + x];
            mass += a;
            acc += Vector2::new(x as f64, y as f64) * a;
        }
    }
    (mass, if mass > 0.0 { acc / mass } else { acc })
}

/// Scale from the ratio of silhouette masses and a lateral shift matching
/// the silhouette centres, keeping the canonical centroid's camera depth.
fn coarse_registration(cloud: &IsotropicCloud, first_frame: &RenderedImage, cam: &Camera) -> Result<RegistrationTransform> {
    let model = splat_render(cloud, cam);
    let (m0, p0) = alpha_moments(&model);
    let (m1, p1) = alpha_moments(first_frame);
    if m0 <= 0.0 {
        return Err(invalid("canonical cloud is not visible from the camera"));
    }
    if m1 <= 0.0 {
        return Err(Error::EmptySilhouette);
    }
    let s = (m1 / m0).sqrt();
    let c0 = centroid(cloud)?;
    let (_, depth) = project(&c0, cam)?;
    let shift_cam = Vec3::new((p1.x - p0.x) * depth / cam.focal, (p1.y - p0.y) * depth / cam.focal, 0.0);
    let shift = cam.extrinsic.rotation_matrix().transpose() * shift_cam;
    Ok(RegistrationTransform::new(Quaternion::IDENTITY, c0 * (1.0 - s) + shift, s))
}

/// The optical axis in world coordinates.
fn optical_axis(cam: &Camera) -> Vec3 {
    cam.extrinsic.rotation_matrix().transpose() * Vec3::z()
}

/// Fits `[r, t, s]` so the transformed cloud reproduces the first frame.
/// The translation component along the optical axis stays at its coarse
/// initial value, which fixes the scale–depth ambiguity of a single view.
pub fn register(
    cloud: &IsotropicCloud,
    first_frame: &RenderedImage,
    cam: &Camera,
    cfg: &RecoveryConfig,
) -> Result<RegistrationTransform> {
    if cloud.is_empty() {
        return Err(invalid("cloud is empty"));
    }
    let target = PhotometricTarget::new(first_frame.clone(), cfg.loss_weights.lambda_dssim)?;
    let init = coarse_registration(cloud, first_frame, cam)?;
    let axis = optical_axis(cam);
    let mut params = [0.0; 8];
    params[..4].copy_from_slice(&init.rotation.to_array());
    params[4..7].copy_from_slice(init.translation.as_slice());
    params[7] = init.scale;
    let mut adam = Adam::<8>::default();
    let mut best: Option<(f64, [f64; 8])> = None;
    for iteration in 0..=cfg.registration_iters {
        let q = Quaternion::new(params[0], params[1], params[2], params[3]);
        let t = Vec3::new(params[4], params[5], params[6]);
        let want_grad = iteration < cfg.registration_iters;
        let e = evaluate_transform(cloud, &q, &t, params[7], cam, &target, want_grad)?;
        if !e.loss.is_finite() {
            return Err(Error::OptimizationFailure {
                iteration,
                reason: "non-finite registration loss".into(),
            });
        }
        if best.is_none_or(|(l, _)| e.loss < l) {
            best = Some((e.loss, params));
        }
        if !want_grad {
            break;
        }
        let dt = e.d_translation - axis * axis.dot(&e.d_translation);
        let grad = [
            e.d_rotation[0],
            e.d_rotation[1],
            e.d_rotation[2],
            e.d_rotation[3],
            dt.x,
            dt.y,
            dt.z,
            e.d_scale,
        ];
        adam.step(&mut params, &grad, cfg.registration_lr);
        normalize_params(&mut params);
        params[7] = params[7].max(1e-6);
    }
    let (_, p) = best.expect("at least one evaluation");
    Ok(RegistrationTransform::new(
        Quaternion::new(p[0], p[1], p[2], p[3]),
        Vec3::new(p[4], p[5], p[6]),
        p[7],
    ))
}

/// Loss components of one pose; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub gs: f64,
    pub acc: f64,
    pub smooth: f64,
}

/// Weights actually applied, zero for disabled terms.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ActiveWeights {
    gs: f64,
    acc: f64,
    smooth: f64,
}

impl ActiveWeights {
    fn combine(&self, gs: f64, acc: f64, smooth: f64) -> LossParts {
        LossParts {
            total: self.gs * gs + self.acc * acc + self.smooth * smooth,
            gs,
            acc,
            smooth,
        }
    }
}

/// Everything fixed while one frame is optimized.
struct FrameProblem<'a> {
    model: &'a IsotropicCloud,
    body_centroid: Vec3,
    cam: &'a Camera,
    target: &'a PhotometricTarget,
    /// Recovered centroids of the preceding frames, oldest first (at most three).
    history: &'a [Vec3],
    flow_delta: Option<Vec3>,
    weights: ActiveWeights,
    acc_form: AccLossForm,
    gravity_dir: Vec3,
    dt: f64,
    diameter: f64,
}

impl FrameProblem<'_> {
    fn centroid(&self, rot: &Matrix3<f64>, t: &Vec3) -> Vec3 {
        rot * self.body_centroid + t
    }

    /// Loss and, when requested, its gradient with respect to `[q, t]`.
    fn evaluate(&self, params: &[f64; 7], want_grad: bool) -> Result<(LossParts, [f64; 7])> {
        let q = Quaternion::new(params[0], params[1], params[2], params[3]);
        let t = Vec3::new(params[4], params[5], params[6]);
        let photo = evaluate_transform(self.model, &q, &t, 1.0, self.cam, self.target, want_grad)?;
        let (rot, jac) = q.rotation_matrix_jacobian();
        let c = self.centroid(&rot, &t);
        let d2 = self.diameter * self.diameter;

        let mut d_c = Vec3::zeros();
        let mut acc = 0.0;
        if self.weights.acc > 0.0 && self.history.len() >= 3 {
            let h = &self.history[self.history.len() - 3..];
            let a_t = finite_diff_acceleration(&h[0], &h[1], &h[2], self.dt)?;
            let a_next = finite_diff_acceleration(&h[1], &h[2], &c, self.dt)?;
            let (raw, _, d_next) = acc_consistency_loss_with_grad(&a_t, &a_next, &self.gravity_dir, self.acc_form)?;
            let scale = self.dt.powi(4) / d2;
            acc = raw * scale;
            // a_next depends on c through c / dt²
            d_c += d_next * (self.weights.acc * scale / (self.dt * self.dt));
        }
        let mut smooth = 0.0;
        if let (true, Some(flow), Some(prev)) = (self.weights.smooth > 0.0, self.flow_delta, self.history.last()) {
            let r = (c - prev) - flow;
            smooth = r.norm_squared() / d2;
            d_c += r * (2.0 * self.weights.smooth / d2);
        }
        let parts = self.weights.combine(photo.loss, acc, smooth);
        let mut grad = [0.0; 7];
        if want_grad {
            let b = self.body_centroid;
            for i in 0..4 {
                grad[i] = self.weights.gs * photo.d_rotation[i] + d_c.dot(&(jac[i] * b));
            }
            let gt = photo.d_translation * self.weights.gs + d_c;
            grad[4..7].copy_from_slice(gt.as_slice());
        }
        Ok((parts, grad))
    }
}

/// Per-frame optimization record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub frame: usize,
    pub total: f64,
    pub gs: f64,
    pub acc: f64,
    pub smooth: f64,
    pub iterations: usize,
    pub best_iteration: usize,
    pub lr_init: f64,
}

struct FrameSolution {
    pose: Pose,
    parts: LossParts,
    best_iteration: usize,
}

/// Learning-rate plan for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Schedule {
    lr_init: f64,
    iterations: usize,
    decay: bool,
}

fn optimize_frame(problem: &FrameProblem<'_>, init: &Pose, schedule: Schedule, dsa: &DsaConfig) -> Result<FrameSolution> {
    let mut params = init.to_params();
    let mut adam = Adam::<7>::default();
    let mut best: Option<([f64; 7], LossParts, usize)> = None;
    for i in 0..=schedule.iterations {
        let want_grad = i < schedule.iterations;
        let (parts, grad) = problem.evaluate(&params, want_grad)?;
        if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::OptimizationFailure {
                iteration: i,
                reason: "non-finite loss or gradient".into(),
            });
        }
        if best.as_ref().is_none_or(|(_, b, _)| parts.total < b.total) {
            best = Some((params, parts, i));
        }
        if !want_grad {
            break;
        }
        let lr = if schedule.decay {
            lr_at_iteration(schedule.lr_init, i, schedule.iterations, dsa)?
        } else {
            schedule.lr_init
        };
        adam.step(&mut params, &grad, lr);
        normalize_params(&mut params);
    }
    let (p, parts, best_iteration) = best.expect("at least one evaluation");
    Ok(FrameSolution {
        pose: Pose::from_params(&p).normalized(),
        parts,
        best_iteration,
    })
}

/// Inputs to a recovery run.
#[derive(Debug, Clone)]
pub struct RecoveryInput<'a> {
    pub frames: &'a [RenderedImage],
    /// Pixel displacement of the object centre since the previous frame.
    pub flow: &'a [Vector2<f64>],
    pub camera: &'a Camera,
    pub physics: &'a PhysicsConfig,
}

/// The recovered trajectory and everything logged on the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryResult {
    pub registration: RegistrationTransform,
    pub poses: Vec<Pose>,
    pub centroids: Vec<Vec3>,
    pub losses: Vec<FrameLoss>,
    pub kalman_trace: Vec<FusionStep>,
}

/// Prepares the canonical cloud: optional pruning of anisotropic input,
/// then isotropization. Isotropic input is used as is.
pub fn prepare_cloud(cloud: &CloudData, cfg: &RecoveryConfig) -> Result<IsotropicCloud> {
    match cloud {
        CloudData::Anisotropic(c) => match &cfg.prune {
            Some(p) => isotropize(&prune(c, p)?),
            None => isotropize(c),
        },
        CloudData::Isotropic(c) => Ok(c.clone()),
    }
}

fn flow_variance_per_axis(sigma_sq: f64, cam: &Camera) -> [f64; 3] {
    // Flow says nothing about motion along the optical axis.
    let o = optical_axis(cam);
    std::array::from_fn(|i| sigma_sq / (1.0 - o[i] * o[i]).max(1e-12))
}

fn check_input(input: &RecoveryInput<'_>, cfg: &RecoveryConfig) -> Result<()> {
    cfg.validate()?;
    let n = input.frames.len();
    if n < 3 {
        return Err(invalid("recovery needs at least three frames"));
    }
    if input.flow.len() != n {
        return Err(invalid(format!("{} flow observations for {n} frames", input.flow.len())));
    }
    cfg.physics.as_ref().unwrap_or(input.physics).validate()
}

/// Runs registration and sequential tracking over all frames.
pub fn recover_sequence(input: &RecoveryInput<'_>, cloud: &IsotropicCloud, cfg: &RecoveryConfig) -> Result<TrajectoryResult> {
    check_input(input, cfg)?;
    let registration = register(cloud, &input.frames[0], input.camera, cfg).map_err(|e| frame_err(0, e))?;
    track_sequence(input, cloud, cfg, registration)
}

/// Sequential tracking from a given first-frame registration, e.g. one
/// shared by several runs on the same scene.
pub fn track_sequence(
    input: &RecoveryInput<'_>,
    cloud: &IsotropicCloud,
    cfg: &RecoveryConfig,
    registration: RegistrationTransform,
) -> Result<TrajectoryResult> {
    check_input(input, cfg)?;
    registration.validate()?;
    let n = input.frames.len();
    let physics = cfg.physics.as_ref().unwrap_or(input.physics);
    let cam = input.camera;
    let dt = physics.dt;

    let model = cloud.transformed(&Matrix3::identity(), &Vec3::zeros(), registration.scale);
    let body_centroid = centroid(&model)?;
    let diameter = model.diameter().max(f64::EPSILON);
    let weights = ActiveWeights {
        gs: cfg.loss_weights.gs,
        acc: if cfg.lacc_enabled { cfg.loss_weights.acc } else { 0.0 },
        smooth: if cfg.smooth_enabled { cfg.loss_weights.smooth } else { 0.0 },
    };

    let pose0 = registration.pose();
    let c0 = pose0.transform_point(&body_centroid);
    let mut poses = vec![pose0];
    let mut centroids = vec![c0];
    let mut losses = Vec::with_capacity(n);
    {
        let target = PhotometricTarget::new(input.frames[0].clone(), cfg.loss_weights.lambda_dssim)?;
        let problem = FrameProblem {
            model: &model,
            body_centroid,
            cam,
            target: &target,
            history: &[],
            flow_delta: None,
            weights,
            acc_form: cfg.acc_form(),
            gravity_dir: physics.gravity_dir,
            dt,
            diameter,
        };
        let (parts, _) = problem.evaluate(&pose0.to_params(), false)?;
        losses.push(FrameLoss {
            frame: 0,
            total: parts.total,
            gs: parts.gs,
            acc: parts.acc,
            smooth: parts.smooth,
            iterations: cfg.registration_iters,
            best_iteration: 0,
            lr_init: cfg.registration_lr,
        });
    }

    let mut noise = cfg.noise;
    if let Some(px) = cfg.flow_noise_px {
        let (_, depth) = project(&c0, cam)?;
        let sigma = px * depth / cam.focal;
        noise.sigma_flow_sq = (sigma * sigma).max(1e-18);
    }
    let mut kalman = KalmanFusion::new(noise, Vec3::zeros(), INITIAL_VELOCITY_VAR)?;
    let flow_var = flow_variance_per_axis(noise.sigma_flow_sq, cam);
    for (axis, var) in flow_var.iter().enumerate() {
        kalman.set_axis_noise(
            axis,
            NoiseConfig {
                sigma_flow_sq: *var,
                ..noise
            },
        )?;
    }
    let mut reference = DisplacementReference::new();
    let mut gravity_sum = 0.0;
    let mut gravity_count = 0usize;
    let fallback = physics.gravity();

    for frame in 1..n {
        let step = (|| -> Result<()> {
            let prev = *poses.last().expect("frame 0 recorded");
            let c_prev = *centroids.last().expect("frame 0 recorded");
            let (_, depth) = project(&c_prev, cam)?;
            let flow_delta = backproject_flow(&input.flow[frame], depth, cam)?;

            let a_latest = (centroids.len() >= 3).then(|| {
                let k = centroids.len();
                finite_diff_acceleration(&centroids[k - 3], &centroids[k - 2], &centroids[k - 1], dt)
            });
            let a_latest = a_latest.transpose()?;
            let control = |latest: Option<Vec3>, sum: f64, count: usize| match cfg.control_input {
                ControlInput::Configured => fallback,
                ControlInput::Latest => latest.unwrap_or(fallback),
                ControlInput::GravityMean if count > 0 => physics.gravity_dir * (sum / count as f64),
                ControlInput::GravityMean => fallback,
            };
            let a_pred = control(a_latest, gravity_sum, gravity_count);

            let init = if cfg.kalman_enabled {
                let predicted = c_prev + kalman.predicted_displacement(&a_pred, dt)?;
                let rot = prev.rotation_matrix();
                Pose::new(prev.rotation, predicted - rot * body_centroid)
            } else {
                prev
            };
            let schedule = if cfg.dsa_enabled {
                let (lr_init, iterations) = reference.schedule(&cfg.dsa)?;
                Schedule {
                    lr_init,
                    iterations,
                    decay: true,
                }
            } else {
                Schedule {
                    lr_init: cfg.dsa.lr_base,
                    iterations: cfg.dsa.iter_base,
                    decay: false,
                }
            };

            let target = PhotometricTarget::new(input.frames[frame].clone(), cfg.loss_weights.lambda_dssim)?;
            let start = centroids.len().saturating_sub(3);
            let problem = FrameProblem {
                model: &model,
                body_centroid,
                cam,
                target: &target,
                history: &centroids[start..],
                flow_delta: Some(flow_delta),
                weights,
                acc_form: cfg.acc_form(),
                gravity_dir: physics.gravity_dir,
                dt,
                diameter,
            };
            let solution = optimize_frame(&problem, &init, schedule, &cfg.dsa)?;
            let learned_c = problem.centroid(&solution.pose.rotation_matrix(), &solution.pose.translation);
            let learned_delta = learned_c - c_prev;
            reference.observe(learned_delta.norm());

            if centroids.len() >= 2 {
                let k = centroids.len();
                let a = finite_diff_acceleration(&centroids[k - 2], &centroids[k - 1], &learned_c, dt)?;
                gravity_sum += a.dot(&physics.gravity_dir);
                gravity_count += 1;
            }

            let (pose, c) = if cfg.kalman_enabled {
                let a_now = if centroids.len() >= 2 {
                    let k = centroids.len();
                    Some(finite_diff_acceleration(&centroids[k - 2], &centroids[k - 1], &learned_c, dt)?)
                } else {
                    None
                };
                let a_fuse = control(a_now, gravity_sum, gravity_count);
                let fused = kalman.fuse_frame(frame, &flow_delta, &learned_delta, &a_fuse, dt)?.fused;
                let c = c_prev + fused;
                let rot = solution.pose.rotation_matrix();
                (Pose::new(solution.pose.rotation, c - rot * body_centroid), c)
            } else {
                (solution.pose, learned_c)
            };
            poses.push(pose);
            centroids.push(c);
            losses.push(FrameLoss {
                frame,
                total: solution.parts.total,
                gs: solution.parts.gs,
                acc: solution.parts.acc,
                smooth: solution.parts.smooth,
                iterations: schedule.iterations,
                best_iteration: solution.best_iteration,
                lr_init: schedule.lr_init,
            });
            Ok(())
        })();
        step.map_err(|e| frame_err(frame, e))?;
    }

    Ok(TrajectoryResult {
        registration,
        poses,
        centroids,
        losses,
        kalman_trace: kalman.trace().to_vec(),
    })
}

fn frame_err(frame: usize, e: Error) -> Error {
    match e {
        Error::Frame { .. } => e,
        other => Error::Frame {
            frame,
            source: Box::new(other),
        },
    }
}

/// File names inside a result directory.
pub mod layout {
    pub const POSES: &str = "recovered_poses.csv";
    pub const CENTROIDS: &str = "centroids.csv";
    pub const LOSSES: &str = "losses.csv";
    pub const KALMAN: &str = "kalman_trace.csv";
    pub const REGISTRATION: &str = "registration.json";
    pub const MASKS: &str = "masks";
    pub const METRICS: &str = "metrics.json";
    pub const PLOT: &str = "metrics.csv";
}

impl TrajectoryResult {
    /// Silhouettes of the cloud at every recovered pose.
    pub fn silhouettes(&self, cloud: &IsotropicCloud, cam: &Camera) -> Result<Vec<Mask>> {
        let model = cloud.transformed(&Matrix3::identity(), &Vec3::zeros(), self.registration.scale);
        self.poses
            .iter()
            .map(|p| Ok(splat_render(&crate::pose::apply_pose(p, &model)?, cam).silhouette()))
            .collect()
    }

    pub fn write_losses_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for l in &self.losses {
            w.serialize(l)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes poses, centroids, losses, the Kalman trace, the registration
    /// and the recovered silhouettes.
    pub fn save(&self, dir: impl AsRef<Path>, cloud: &IsotropicCloud, cam: &Camera) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join(layout::MASKS))?;
        write_pose_csv(std::fs::File::create(dir.join(layout::POSES))?, &self.poses)?;
        crate::simulator::write_points_csv(std::fs::File::create(dir.join(layout::CENTROIDS))?, &self.centroids)?;
        self.write_losses_csv(std::fs::File::create(dir.join(layout::LOSSES))?)?;
        write_trace_csv(std::fs::File::create(dir.join(layout::KALMAN))?, &self.kalman_trace)?;
        std::fs::write(dir.join(layout::REGISTRATION), serde_json::to_string_pretty(&self.registration)?)?;
        for (n, m) in self.silhouettes(cloud, cam)?.iter().enumerate() {
            m.save_png(dir.join(layout::MASKS).join(format!("{n:04}.png")))?;
        }
        Ok(())
    }
}

/// Applies a registration transform to an isotropic cloud.
pub fn registered_cloud(cloud: &IsotropicCloud, t: &RegistrationTransform) -> Result<IsotropicCloud> {
    apply_registration(t, cloud)
}
