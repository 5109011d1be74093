//! Constant-acceleration Kalman fusion of per-interval displacements.
//!
//! Each world axis carries an independent two-state filter `[Δs, v]`. The
//! displacement state is an *interval* quantity: at the start of every frame
//! interval it is reset to zero (and its covariance row and column cleared),
//! so the prediction `Δs⁻ = v·dt + ½·a·dt²` is the displacement expected over
//! the coming interval alone. Two sensors observe it: the displacement
//! back-projected from optical flow and the one learned by pose optimization.

use std::io::Write;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::Vec3;
use crate::render::Camera;

/// Covariance of `[Δs, v]`.
pub type StateCovariance = Matrix2<f64>;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-12;

/// Filter state for one axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MotionState {
    pub displacement: f64,
    pub velocity: f64,
}

impl MotionState {
    pub fn new(displacement: f64, velocity: f64) -> Self {
        Self { displacement, velocity }
    }

    fn vector(&self) -> Vector2<f64> {
        Vector2::new(self.displacement, self.velocity)
    }

    fn from_vector(v: Vector2<f64>) -> Self {
        Self::new(v.x, v.y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.displacement.is_finite() && self.velocity.is_finite() {
            Ok(())
        } else {
            Err(invalid("motion state must be finite"))
        }
    }
}

/// Checks symmetry and positive semidefiniteness of a covariance.
pub fn validate_covariance(p: &StateCovariance) -> Result<()> {
    if p.iter().any(|v| !v.is_finite()) {
        return Err(invalid("covariance must be finite"));
    }
    let scale = p.abs().max().max(1.0);
    if (p[(0, 1)] - p[(1, 0)]).abs() > SYMMETRY_TOL * scale {
        return Err(invalid("covariance must be symmetric"));
    }
    let trace = p[(0, 0)] + p[(1, 1)];
    let det = p[(0, 0)] * p[(1, 1)] - p[(0, 1)] * p[(1, 0)];
    let disc = ((trace * trace / 4.0) - det).max(0.0).sqrt();
    if trace / 2.0 - disc < -PSD_TOL * scale {
        return Err(invalid("covariance must be positive semidefinite"));
    }
    Ok(())
}

/// Process and observation noise variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_ds_sq: f64,
    pub sigma_v_sq: f64,
    pub sigma_flow_sq: f64,
    pub sigma_learn_sq: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_ds_sq: 1.0e-3 * 1.0e-3,
            sigma_v_sq: 1.0e-2 * 1.0e-2,
            sigma_flow_sq: 5.0e-3 * 5.0e-3,
            sigma_learn_sq: 2.0e-3 * 2.0e-3,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.sigma_ds_sq, self.sigma_v_sq, self.sigma_flow_sq, self.sigma_learn_sq];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("noise variances must be finite and nonnegative"));
        }
        if self.sigma_flow_sq == 0.0 && self.sigma_learn_sq == 0.0 {
            return Err(invalid("at least one observation variance must be positive"));
        }
        Ok(())
    }

    fn process(&self) -> StateCovariance {
        Matrix2::new(self.sigma_ds_sq, 0.0, 0.0, self.sigma_v_sq)
    }
}

/// The two displacement observations of one axis over one interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationPair {
    pub z_flow: f64,
    pub z_learn: f64,
}

impl ObservationPair {
    pub fn new(z_flow: f64, z_learn: f64) -> Self {
        Self { z_flow, z_learn }
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_flow.is_finite() && self.z_learn.is_finite() {
            Ok(())
        } else {
            Err(invalid("observations must be finite"))
        }
    }
}

fn observation_matrix() -> Matrix2<f64> {
    Matrix2::new(1.0, 0.0, 1.0, 0.0)
}

/// Time update: `X⁻ = F·X + B·a`, `P⁻ = F·P·Fᵀ + Q`.
pub fn predict(
    state: &MotionState,
    p: &StateCovariance,
    a: f64,
    dt: f64,
    noise: &NoiseConfig,
) -> Result<(MotionState, StateCovariance)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt must be positive"));
    }
    if !a.is_finite() {
        return Err(invalid("control input must be finite"));
    }
    state.validate()?;
    let f = Matrix2::new(1.0, dt, 0.0, 1.0);
    let b = Vector2::new(0.5 * dt * dt, dt);
    let x = f * state.vector() + b * a;
    let p_pred = f * p * f.transpose() + noise.process();
    Ok((MotionState::from_vector(x), p_pred))
}

/// Kalman gain `K = P⁻Hᵀ(HP⁻Hᵀ + R)⁻¹`. Column 0 weights the flow
/// observation, column 1 the learned one.
pub fn gain(p_pred: &StateCovariance, noise: &NoiseConfig) -> Result<Matrix2<f64>> {
    let h = observation_matrix();
    let r = Matrix2::new(noise.sigma_flow_sq, 0.0, 0.0, noise.sigma_learn_sq);
    let s = h * p_pred * h.transpose() + r;
    let det = s.determinant();
    let scale = s[(0, 0)].abs() * s[(1, 1)].abs();
    if !(det.is_finite() && det > 1e-14 * scale && det > 0.0) {
        return Err(Error::SingularMatrix);
    }
    let s_inv = Matrix2::new(s[(1, 1)], -s[(0, 1)], -s[(1, 0)], s[(0, 0)]) / det;
    Ok(p_pred * h.transpose() * s_inv)
}

/// Measurement update: `X⁺ = X⁻ + K(z − H·X⁻)`, `P⁺ = (I − K·H)·P⁻`.
pub fn update(
    x_pred: &MotionState,
    p_pred: &StateCovariance,
    z: &ObservationPair,
    noise: &NoiseConfig,
) -> Result<(MotionState, StateCovariance)> {
    let (x, p, _) = update_with_gain(x_pred, p_pred, z, noise)?;
    Ok((x, p))
}

fn update_with_gain(
    x_pred: &MotionState,
    p_pred: &StateCovariance,
    z: &ObservationPair,
    noise: &NoiseConfig,
) -> Result<(MotionState, StateCovariance, Matrix2<f64>)> {
    z.validate()?;
    x_pred.validate()?;
    let k = gain(p_pred, noise)?;
    let h = observation_matrix();
    let xv = x_pred.vector();
    let innovation = Vector2::new(z.z_flow, z.z_learn) - h * xv;
    let x = xv + k * innovation;
    let p = (Matrix2::identity() - k * h) * p_pred;
    let p = (p + p.transpose()) * 0.5;
    Ok((MotionState::from_vector(x), p, k))
}

/// World-frame displacement of a pixel shift at the given camera depth.
/// The depth component along the optical axis is unobservable and set to 0.
pub fn backproject_flow(pixel_displacement: &Vector2<f64>, depth: f64, cam: &Camera) -> Result<Vec3> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(invalid("depth must be positive"));
    }
    let s = depth / cam.focal;
    let d_cam = Vec3::new(pixel_displacement.x * s, pixel_displacement.y * s, 0.0);
    Ok(cam.extrinsic.rotation_matrix().transpose() * d_cam)
}

/// One axis filter between frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisFilter {
    pub state: MotionState,
    pub covariance: StateCovariance,
}

impl AxisFilter {
    pub fn new(velocity: f64, velocity_var: f64) -> Self {
        Self {
            state: MotionState::new(0.0, velocity),
            covariance: Matrix2::new(0.0, 0.0, 0.0, velocity_var),
        }
    }
}

/// Everything one axis did during one fused interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisTrace {
    pub prior_displacement: f64,
    pub prior_velocity: f64,
    pub z_flow: f64,
    pub z_learn: f64,
    pub control: f64,
    /// Gain entries `[k_ds_flow, k_ds_learn, k_v_flow, k_v_learn]`.
    pub gain: [f64; 4],
    pub posterior_displacement: f64,
    pub posterior_velocity: f64,
}

/// Result of fusing one frame interval on all three axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionStep {
    pub frame: usize,
    pub fused: Vec3,
    pub velocity: Vec3,
    pub axes: [AxisTrace; 3],
}

/// Three independent axis filters plus the trace of every fused interval.
#[derive(Debug, Clone)]
pub struct KalmanFusion {
    axes: [AxisFilter; 3],
    noise: [NoiseConfig; 3],
    trace: Vec<FusionStep>,
}

/// Default prior variance of the initial velocity; large enough that the
/// first interval is decided by the observations.
pub const INITIAL_VELOCITY_VAR: f64 = 1.0e2;

impl KalmanFusion {
    pub fn new(noise: NoiseConfig, initial_velocity: Vec3, initial_velocity_var: f64) -> Result<Self> {
        noise.validate()?;
        if !(initial_velocity_var >= 0.0 && initial_velocity_var.is_finite()) {
            return Err(invalid("initial velocity variance must be finite and nonnegative"));
        }
        if initial_velocity.iter().any(|v| !v.is_finite()) {
            return Err(invalid("initial velocity must be finite"));
        }
        Ok(Self {
            axes: std::array::from_fn(|i| AxisFilter::new(initial_velocity[i], initial_velocity_var)),
            noise: [noise; 3],
            trace: Vec::new(),
        })
    }

    pub fn noise(&self) -> &[NoiseConfig; 3] {
        &self.noise
    }

    /// Overrides the noise model of a single axis.
    pub fn set_axis_noise(&mut self, axis: usize, noise: NoiseConfig) -> Result<()> {
        noise.validate()?;
        let slot = self.noise.get_mut(axis).ok_or_else(|| invalid(format!("axis {axis} out of range")))?;
        *slot = noise;
        Ok(())
    }

    pub fn axes(&self) -> &[AxisFilter; 3] {
        &self.axes
    }

    pub fn velocity(&self) -> Vec3 {
        Vec3::new(self.axes[0].state.velocity, self.axes[1].state.velocity, self.axes[2].state.velocity)
    }

    pub fn trace(&self) -> &[FusionStep] {
        &self.trace
    }

    /// Predicted displacement over the next interval, without consuming it.
    pub fn predicted_displacement(&self, a: &Vec3, dt: f64) -> Result<Vec3> {
        let mut out = Vec3::zeros();
        for (i, axis) in self.axes.iter().enumerate() {
            let (x, _) = predict(&reset(axis).state, &reset(axis).covariance, a[i], dt, &self.noise[i])?;
            out[i] = x.displacement;
        }
        Ok(out)
    }

    /// Fuses the interval ending at `frame`: resets each axis' displacement,
    /// predicts with control `a`, and updates with both observations.
    pub fn fuse_frame(&mut self, frame: usize, z_flow: &Vec3, z_learn: &Vec3, a: &Vec3, dt: f64) -> Result<&FusionStep> {
        let mut next = self.axes;
        let mut traces = [AxisTrace {
            prior_displacement: 0.0,
            prior_velocity: 0.0,
            z_flow: 0.0,
            z_learn: 0.0,
            control: 0.0,
            gain: [0.0; 4],
            posterior_displacement: 0.0,
            posterior_velocity: 0.0,
        }; 3];
        for i in 0..3 {
            let start = reset(&self.axes[i]);
            let (x_pred, p_pred) = predict(&start.state, &start.covariance, a[i], dt, &self.noise[i])?;
            let z = ObservationPair::new(z_flow[i], z_learn[i]);
            let (x, p, k) = update_with_gain(&x_pred, &p_pred, &z, &self.noise[i])?;
            validate_covariance(&p).map_err(|e| Error::Frame {
                frame,
                source: Box::new(e),
            })?;
            next[i] = AxisFilter { state: x, covariance: p };
            traces[i] = AxisTrace {
                prior_displacement: x_pred.displacement,
                prior_velocity: x_pred.velocity,
                z_flow: z.z_flow,
                z_learn: z.z_learn,
                control: a[i],
                gain: [k[(0, 0)], k[(0, 1)], k[(1, 0)], k[(1, 1)]],
                posterior_displacement: x.displacement,
                posterior_velocity: x.velocity,
            };
        }
        self.axes = next;
        self.trace.push(FusionStep {
            frame,
            fused: Vec3::new(next[0].state.displacement, next[1].state.displacement, next[2].state.displacement),
            velocity: self.velocity(),
            axes: traces,
        });
        Ok(self.trace.last().expect("just pushed"))
    }
}

fn reset(axis: &AxisFilter) -> AxisFilter {
    let mut p = axis.covariance;
    p[(0, 0)] = 0.0;
    p[(0, 1)] = 0.0;
    p[(1, 0)] = 0.0;
    AxisFilter {
        state: MotionState::new(0.0, axis.state.velocity),
        covariance: p,
    }
}

/// Writes one CSV row per frame and axis.
pub fn write_trace_csv<W: Write>(writer: W, steps: &[FusionStep]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "frame",
        "axis",
        "prior_ds",
        "prior_v",
        "control",
        "z_flow",
        "z_learn",
        "k_ds_flow",
        "k_ds_learn",
        "k_v_flow",
        "k_v_learn",
        "post_ds",
        "post_v",
    ])?;
    for step in steps {
        for (axis, t) in ["x", "y", "z"].iter().zip(&step.axes) {
            let mut row = vec![step.frame.to_string(), axis.to_string()];
            row.extend(
                [
                    t.prior_displacement,
                    t.prior_velocity,
                    t.control,
                    t.z_flow,
                    t.z_learn,
                    t.gain[0],
                    t.gain[1],
                    t.gain[2],
                    t.gain[3],
                    t.posterior_displacement,
                    t.posterior_velocity,
                ]
                .iter()
                .map(|v| format!("{v:e}")),
            );
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{Pose, Quaternion};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_process(flow: f64, learn: f64) -> NoiseConfig {
        NoiseConfig {
            sigma_ds_sq: 0.0,
            sigma_v_sq: 0.0,
            sigma_flow_sq: flow,
            sigma_learn_sq: learn,
        }
    }

    #[test]
    fn predict_examples() {
        let q0 = zero_process(1.0, 1.0);
        let (x, _) = predict(&MotionState::new(0.0, 1.0), &Matrix2::zeros(), 0.0, 1.0, &q0).unwrap();
        assert_eq!(x, MotionState::new(1.0, 1.0));
        let (x, _) = predict(&MotionState::new(0.0, 0.0), &Matrix2::zeros(), 2.0, 1.0, &q0).unwrap();
        assert_eq!(x, MotionState::new(1.0, 2.0));
        let (_, p) = predict(&MotionState::default(), &Matrix2::identity(), 0.0, 1.0, &q0).unwrap();
        assert_eq!(p, Matrix2::new(2.0, 1.0, 1.0, 1.0));
        assert!(predict(&MotionState::default(), &Matrix2::identity(), 0.0, 0.0, &q0).is_err());
    }

    #[test]
    fn large_prior_gives_inverse_variance_mean() {
        let noise = zero_process(4.0, 1.0);
        let p = Matrix2::new(1e8, 0.0, 0.0, 1.0);
        let (x, _) = update(&MotionState::default(), &p, &ObservationPair::new(3.0, 8.0), &noise).unwrap();
        let expected = (3.0 / 4.0 + 8.0 / 1.0) / (1.0 / 4.0 + 1.0);
        assert!((x.displacement - expected).abs() < 1e-6);
    }

    #[test]
    fn gain_limits() {
        let p = Matrix2::new(1.0, 0.2, 0.2, 0.5);
        let k = gain(&p, &zero_process(1e15, 1.0)).unwrap();
        assert!(k[(0, 0)].abs() < 1e-14 && k[(1, 0)].abs() < 1e-14);
        assert_eq!(gain(&Matrix2::zeros(), &zero_process(1.0, 1.0)).unwrap(), Matrix2::zeros());
        assert!(matches!(gain(&Matrix2::zeros(), &zero_process(0.0, 0.0)), Err(Error::SingularMatrix)));
    }

    #[test]
    fn update_examples() {
        let noise = zero_process(1.0, 1.0);
        let p = Matrix2::new(1.0, 0.0, 0.0, 0.0);
        let xp = MotionState::new(1.0, 0.0);
        let (x, _) = update(&xp, &p, &ObservationPair::new(2.0, 0.0), &noise).unwrap();
        assert!((x.displacement - 1.0).abs() < 1e-15);

        let (x, _) = update(&xp, &Matrix2::new(0.7, 0.1, 0.1, 0.3), &ObservationPair::new(1.0, 1.0), &noise).unwrap();
        assert_eq!(x, xp);

        let exact_flow = zero_process(0.0, 1e12);
        let (x, _) = update(&xp, &Matrix2::new(2.0, 0.3, 0.3, 1.0), &ObservationPair::new(5.0, -3.0), &exact_flow).unwrap();
        assert!((x.displacement - 5.0).abs() < 1e-9);
    }

    #[test]
    fn flow_gain_decreases_with_flow_noise() {
        let p = Matrix2::new(0.3, 0.05, 0.05, 0.2);
        let mut prev = f64::INFINITY;
        for i in 0..40 {
            let flow = 1e-4 * 1.5f64.powi(i);
            let k = gain(&p, &zero_process(flow, 0.01)).unwrap();
            let mag = k.column(0).norm();
            assert!(mag < prev, "step {i}");
            prev = mag;
        }
    }

    #[test]
    fn backprojection_examples() {
        let cam = Camera::centered(100.0, 64, 64).unwrap();
        assert_eq!(backproject_flow(&Vector2::zeros(), 2.0, &cam).unwrap(), Vec3::zeros());
        let d = backproject_flow(&Vector2::new(10.0, 0.0), 2.0, &cam).unwrap();
        assert!((d - Vec3::new(0.2, 0.0, 0.0)).norm() < 1e-15);
        let d2 = backproject_flow(&Vector2::new(10.0, 0.0), 4.0, &cam).unwrap();
        assert!((d2 - 2.0 * d).norm() < 1e-15);
        assert!(backproject_flow(&Vector2::new(1.0, 0.0), 0.0, &cam).is_err());

        let mut rotated = cam.clone();
        rotated.extrinsic = Pose::new(Quaternion::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2), Vec3::zeros());
        let d = backproject_flow(&Vector2::new(10.0, 0.0), 2.0, &rotated).unwrap();
        let back = rotated.extrinsic.rotation_matrix() * d;
        assert!((back - Vec3::new(0.2, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn fusion_is_exact_for_consistent_observations() {
        let dt = 1.0 / 60.0;
        let g = Vec3::new(0.0, 9.8, 0.0);
        let v0 = Vec3::new(3.0, -2.5, 0.4);
        let mut f = KalmanFusion::new(NoiseConfig::default(), v0, 0.0).unwrap();
        for n in 1..20 {
            let v_start = v0 + g * ((n - 1) as f64 * dt);
            let truth = v_start * dt + 0.5 * g * dt * dt;
            let step = f.fuse_frame(n, &truth, &truth, &g, dt).unwrap();
            assert!((step.fused - truth).norm() < 1e-12, "frame {n}");
        }
    }

    #[test]
    fn corrupted_axis_tracks_learned_observation() {
        let dt = 0.1;
        let mut f = KalmanFusion::new(NoiseConfig::default(), Vec3::zeros(), INITIAL_VELOCITY_VAR).unwrap();
        let mut f_x = f.clone();
        f_x.set_axis_noise(
            0,
            NoiseConfig {
                sigma_flow_sq: 1e12,
                ..NoiseConfig::default()
            },
        )
        .unwrap();
        let flow = Vec3::new(0.5, 0.01, 0.02);
        let learn = Vec3::new(0.01, 0.012, 0.018);
        let fused = f.fuse_frame(1, &flow, &learn, &Vec3::zeros(), dt).unwrap().fused;
        // the corrupted axis follows the learned observation; the others are untouched
        let fused_x = f_x.fuse_frame(1, &flow, &learn, &Vec3::zeros(), dt).unwrap().fused;
        assert!((fused_x.x - learn.x).abs() < 1e-6);
        assert!((fused_x.y - fused.y).abs() < 1e-15 && (fused_x.z - fused.z).abs() < 1e-15);
        let (wf, wl) = (1.0 / NoiseConfig::default().sigma_flow_sq, 1.0 / NoiseConfig::default().sigma_learn_sq);
        let mean = (flow.x * wf + learn.x * wl) / (wf + wl);
        assert!((fused.x - mean).abs() < 1e-6, "{} vs {mean}", fused.x);
    }

    #[test]
    fn static_object_stays_at_rest() {
        let mut f = KalmanFusion::new(NoiseConfig::default(), Vec3::new(0.5, -0.5, 0.2), 1.0).unwrap();
        let mut last = f64::INFINITY;
        for n in 1..60 {
            let step = f.fuse_frame(n, &Vec3::zeros(), &Vec3::zeros(), &Vec3::zeros(), 0.05).unwrap();
            assert!(step.fused.norm() < 0.05);
            last = step.velocity.norm();
        }
        assert!(last < 1e-3, "velocity {last}");
    }

    #[test]
    fn covariance_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut f = KalmanFusion::new(NoiseConfig::default(), Vec3::zeros(), INITIAL_VELOCITY_VAR).unwrap();
        for n in 1..200 {
            let z1 = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            let z2 = Vec3::from_fn(|_, _| rng.random_range(-0.1..0.1));
            f.fuse_frame(n, &z1, &z2, &Vec3::new(0.0, 9.8, 0.0), 1.0 / 60.0).unwrap();
            for axis in f.axes() {
                validate_covariance(&axis.covariance).unwrap();
            }
        }
    }

    /// Final-state estimate from the full stacked least-squares problem over
    /// all states `X_0..X_N`, solved directly.
    fn batch_estimate(
        x0: Vector2<f64>,
        p0: Matrix2<f64>,
        controls: &[f64],
        observations: &[(f64, f64)],
        dt: f64,
        noise: &NoiseConfig,
    ) -> Vector2<f64> {
        let steps = controls.len();
        let n = 2 * (steps + 1);
        let rows = 2 + 2 * steps + 2 * steps;
        let mut a = DMatrix::<f64>::zeros(rows, n);
        let mut b = DVector::<f64>::zeros(rows);
        let mut row = 0;
        // prior on X_0, whitened by the Cholesky factor of P0
        let l = p0.cholesky().unwrap().l();
        let l_inv = l.try_inverse().unwrap();
        for r in 0..2 {
            for c in 0..2 {
                a[(row + r, c)] = l_inv[(r, c)];
            }
            b[row + r] = (l_inv * x0)[r];
        }
        row += 2;
        let f = Matrix2::new(1.0, dt, 0.0, 1.0);
        let bu = Vector2::new(0.5 * dt * dt, dt);
        let q_sd = [noise.sigma_ds_sq.sqrt(), noise.sigma_v_sq.sqrt()];
        for k in 0..steps {
            // X_{k+1} − F X_k = B a_k
            for r in 0..2 {
                a[(row + r, 2 * (k + 1) + r)] = 1.0 / q_sd[r];
                for c in 0..2 {
                    a[(row + r, 2 * k + c)] = -f[(r, c)] / q_sd[r];
                }
                b[row + r] = bu[r] * controls[k] / q_sd[r];
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

    #[test]
    fn filter_matches_batch_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..50 {
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

            let mut x = MotionState::from_vector(x0);
            let mut p = p0;
            for k in 0..steps {
                let (xp, pp) = predict(&x, &p, controls[k], dt, &noise).unwrap();
                (x, p) = update(&xp, &pp, &ObservationPair::new(obs[k].0, obs[k].1), &noise).unwrap();
                validate_covariance(&p).unwrap();
            }
            let oracle = batch_estimate(x0, p0, &controls, &obs, dt, &noise);
            let err = (x.vector() - oracle).norm() / oracle.norm().max(1e-12);
            assert!(err < 1e-8, "case {case}: relative error {err}");
        }
    }

    #[test]
    fn trace_csv_has_row_per_axis() {
        let mut f = KalmanFusion::new(NoiseConfig::default(), Vec3::zeros(), 1.0).unwrap();
        f.fuse_frame(1, &Vec3::repeat(0.1), &Vec3::repeat(0.1), &Vec3::zeros(), 0.1).unwrap();
        f.fuse_frame(2, &Vec3::repeat(0.1), &Vec3::repeat(0.1), &Vec3::zeros(), 0.1).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, f.trace()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 6);
        assert!(text.starts_with("frame,axis,prior_ds"));
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseConfig::default().validate().is_ok());
        assert!(zero_process(0.0, 0.0).validate().is_err());
        assert!(NoiseConfig {
            sigma_v_sq: -1.0,
            ..NoiseConfig::default()
        }
        .validate()
        .is_err());
    }
}
