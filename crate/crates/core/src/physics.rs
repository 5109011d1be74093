//! Newtonian consistency terms: finite-difference acceleration of the
//! centroid, its split along and across gravity, the acceleration
//! consistency penalty, and the per-interval displacement law.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gaussian::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    /// Unit vector pointing the way gravity pulls.
    pub gravity_dir: Vec3,
    /// Seconds between frames.
    pub dt: f64,
    /// World units per second squared. Only required when simulating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity_mag: Option<f64>,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            gravity_dir: Vec3::new(0.0, 1.0, 0.0),
            dt: 1.0 / 60.0,
            gravity_mag: Some(9.8),
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.gravity_dir.norm() - 1.0).abs() > 1e-9 {
            return Err(invalid("gravity_dir must be a unit vector"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        if let Some(g) = self.gravity_mag {
            if !g.is_finite() || g < 0.0 {
                return Err(invalid("gravity_mag must be finite and nonnegative"));
            }
        }
        Ok(())
    }

    /// Gravity vector, or zero when no magnitude is configured.
    pub fn gravity(&self) -> Vec3 {
        self.gravity_dir * self.gravity_mag.unwrap_or(0.0)
    }
}

/// Centroids sampled on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSeries {
    pub timestamps: Vec<f64>,
    pub centroids: Vec<Vec3>,
}

impl CentroidSeries {
    pub fn uniform(centroids: Vec<Vec3>, dt: f64) -> Self {
        let timestamps = (0..centroids.len()).map(|i| i as f64 * dt).collect();
        Self { timestamps, centroids }
    }

    pub fn validate(&self, dt: f64) -> Result<()> {
        if self.timestamps.len() != self.centroids.len() {
            return Err(invalid("timestamp and centroid counts differ"));
        }
        for w in self.timestamps.windows(2) {
            if !(w[1] > w[0]) || ((w[1] - w[0]) - dt).abs() > 1e-9 {
                return Err(invalid("timestamps must be strictly increasing with uniform spacing dt"));
            }
        }
        Ok(())
    }

    /// Accelerations at every interior sample.
    pub fn accelerations(&self, dt: f64) -> Result<Vec<Vec3>> {
        self.centroids
            .windows(3)
            .map(|w| finite_diff_acceleration(&w[0], &w[1], &w[2], dt))
            .collect()
    }
}

/// Central second difference `((next − cur) − (cur − prev)) / dt²`.
pub fn finite_diff_acceleration(prev: &Vec3, cur: &Vec3, next: &Vec3, dt: f64) -> Result<Vec3> {
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    Ok(((next - cur) - (cur - prev)) / (dt * dt))
}

/// Splits `a` into components parallel and orthogonal to the unit vector `g`.
pub fn decompose_acceleration(a: &Vec3, g: &Vec3) -> Result<(Vec3, Vec3)> {
    if (g.norm() - 1.0).abs() > 1e-6 {
        return Err(invalid("gravity direction must be a unit vector"));
    }
    let parallel = g * a.dot(g);
    Ok((parallel, a - parallel))
}

/// Which algebraic form of the acceleration consistency penalty to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccLossForm {
    /// `‖(a∥ᵗ⁺¹ − a∥ᵗ) + (a⊥ᵗ⁺¹ − a⊥ᵗ)‖²`: penalizes change of either component.
    #[default]
    Change,
    /// `‖a∥ᵗ + (a⊥ᵗ⁺¹ − a⊥ᵗ)‖²`, the expression read term by term.
    Literal,
}

/// Acceleration consistency penalty between two consecutive accelerations.
pub fn acc_consistency_loss(a_t: &Vec3, a_next: &Vec3, g: &Vec3, form: AccLossForm) -> Result<f64> {
    let (par_t, perp_t) = decompose_acceleration(a_t, g)?;
    let (par_next, perp_next) = decompose_acceleration(a_next, g)?;
    let r = residual(&par_t, &perp_t, &par_next, &perp_next, form);
    Ok(r.norm_squared())
}

fn residual(par_t: &Vec3, perp_t: &Vec3, par_next: &Vec3, perp_next: &Vec3, form: AccLossForm) -> Vec3 {
    let perp_change = perp_next - perp_t;
    match form {
        AccLossForm::Change => (par_next - par_t) + perp_change,
        AccLossForm::Literal => par_t + perp_change,
    }
}

/// Penalty together with its gradients with respect to `a_t` and `a_next`.
pub fn acc_consistency_loss_with_grad(
    a_t: &Vec3,
    a_next: &Vec3,
    g: &Vec3,
    form: AccLossForm,
) -> Result<(f64, Vec3, Vec3)> {
    let (par_t, perp_t) = decompose_acceleration(a_t, g)?;
    let (par_next, perp_next) = decompose_acceleration(a_next, g)?;
    let r = residual(&par_t, &perp_t, &par_next, &perp_next, form);
    let loss = r.norm_squared();
    // With P = g gᵀ: a∥ = P a, a⊥ = (I − P) a.
    let project = |v: &Vec3| g * v.dot(g);
    let two_r = r * 2.0;
    let (d_t, d_next) = match form {
        // r = a_next − a_t
        AccLossForm::Change => (-two_r, two_r),
        // r = P a_t + (I − P)(a_next − a_t) = (2P − I) a_t + (I − P) a_next
        AccLossForm::Literal => (project(&two_r) * 2.0 - two_r, two_r - project(&two_r)),
    };
    Ok((loss, d_t, d_next))
}

/// Displacement over `[t, t + dt]` under constant acceleration:
/// `(a dt) t + ½ a dt² + v0 dt`.
pub fn predicted_displacement(v0: f64, a: f64, t: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(invalid("dt must be positive"));
    }
    Ok((a * dt) * t + (0.5 * a * dt * dt + v0 * dt))
}
