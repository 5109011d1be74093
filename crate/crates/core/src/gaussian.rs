//! Gaussian point-cloud representation and the density-control operations
//! applied to it before motion recovery.
//!
//! Two kernel flavours exist: [`GaussianKernel`] carries a full covariance,
//! [`IsotropicKernel`] a single radius. Pruning works on the former,
//! rendering and centroid computation on the latter.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Vec3 = Vector3<f64>;

/// Symmetry tolerance used when validating covariances.
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub position: Vec3,
    pub covariance: Matrix3<f64>,
    pub color: Vec3,
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsotropicKernel {
    pub position: Vec3,
    pub radius: f64,
    pub color: Vec3,
    pub opacity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianCloud {
    pub kernels: Vec<GaussianKernel>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IsotropicCloud {
    pub kernels: Vec<IsotropicKernel>,
}

/// Thresholds for [`prune`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Largest admissible covariance eigenvalue (world units squared).
    pub max_axis: f64,
    /// Nearest-neighbour distance limit as a multiple of the mean pairwise distance.
    pub distance_factor: f64,
}

impl PruneConfig {
    pub fn new(max_axis: f64, distance_factor: f64) -> Result<Self> {
        let cfg = Self {
            max_axis,
            distance_factor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_axis > 0.0) || !(self.distance_factor > 0.0) {
            return Err(invalid("prune thresholds must be strictly positive"));
        }
        Ok(())
    }
}

fn check_color_opacity(color: &Vec3, opacity: f64) -> Result<()> {
    if !(opacity > 0.0 && opacity <= 1.0) {
        return Err(invalid(format!("opacity {opacity} outside (0, 1]")));
    }
    if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(invalid("color components must lie in [0, 1]"));
    }
    Ok(())
}

impl GaussianKernel {
    pub fn new(position: Vec3, covariance: Matrix3<f64>, color: Vec3, opacity: f64) -> Result<Self> {
        let kernel = Self {
            position,
            covariance,
            color,
            opacity,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    pub fn validate(&self) -> Result<()> {
        check_color_opacity(&self.color, self.opacity)?;
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite kernel position"));
        }
        let cov = &self.covariance;
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite covariance entry"));
        }
        if (cov - cov.transpose()).amax() > SYMMETRY_TOL * cov.amax().max(1.0) {
            return Err(invalid("covariance is not symmetric"));
        }
        if symmetric_eigenvalues(cov)[2] <= 0.0 {
            return Err(invalid("covariance is not positive definite"));
        }
        Ok(())
    }
}

impl IsotropicKernel {
    pub fn new(position: Vec3, radius: f64, color: Vec3, opacity: f64) -> Result<Self> {
        let kernel = Self {
            position,
            radius,
            color,
            opacity,
        };
        kernel.validate()?;
        Ok(kernel)
    }

    pub fn validate(&self) -> Result<()> {
        check_color_opacity(&self.color, self.opacity)?;
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(invalid(format!("radius {} must be positive", self.radius)));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite kernel position"));
        }
        Ok(())
    }
}

impl GaussianCloud {
    pub fn new(kernels: Vec<GaussianKernel>) -> Self {
        Self { kernels }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.kernels.iter().map(|k| k.position).collect()
    }
}

impl IsotropicCloud {
    pub fn new(kernels: Vec<IsotropicKernel>) -> Self {
        Self { kernels }
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.kernels.iter().map(|k| k.position).collect()
    }

    /// Largest distance between any two kernel positions.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0_f64;
        for (i, a) in self.kernels.iter().enumerate() {
            for b in &self.kernels[i + 1..] {
                best = best.max((a.position - b.position).norm());
            }
        }
        best
    }
}

/// Eigenvalues of a symmetric 3x3 matrix in descending order.
///
/// The input is symmetrized first. Uses the trigonometric closed form for
/// the roots of the characteristic polynomial.
pub fn symmetric_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let a = (m + m.transpose()) * 0.5;
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    if p1 == 0.0 {
        let mut d = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
        d.sort_by(|x, y| y.total_cmp(x));
        return d;
    }
    let q = a.trace() / 3.0;
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b = (a - Matrix3::identity() * q) / p;
    let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let largest = q + 2.0 * p * phi.cos();
    let smallest = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let middle = 3.0 * q - largest - smallest;
    [largest, middle, smallest]
}

/// Length of the kernel's principal axis, i.e. the largest covariance eigenvalue.
pub fn principal_axis_length(kernel: &GaussianKernel) -> Result<f64> {
    if !kernel.covariance.iter().all(|v| v.is_finite()) {
        return Err(invalid("non-finite covariance entry"));
    }
    let largest = symmetric_eigenvalues(&kernel.covariance)[0];
    if largest <= 0.0 {
        return Err(invalid("covariance is not positive definite"));
    }
    Ok(largest)
}

/// Mean distance over all ordered pairs, self-pairs included:
/// `(1/N²) Σ_{m,n} ‖μ_m − μ_n‖`.
pub fn mean_pairwise_distance(positions: &[Vec3]) -> Result<f64> {
    let n = positions.len();
    if n < 2 {
        return Err(Error::InsufficientPoints { needed: 2, got: n });
    }
    // Each unordered pair appears twice in the full double sum.
    let mut sum = 0.0;
    for (i, a) in positions.iter().enumerate() {
        for b in &positions[i + 1..] {
            sum += (a - b).norm();
        }
    }
    Ok(2.0 * sum / (n * n) as f64)
}

/// Distance from each point to its nearest other point.
pub fn nearest_neighbor_distances(positions: &[Vec3]) -> Vec<f64> {
    positions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            positions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| (a - b).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Removes oversized kernels and isolated outliers.
///
/// A kernel survives when its largest covariance eigenvalue is at most
/// `max_axis` and its nearest-neighbour distance is at most
/// `distance_factor * D_avg`, with `D_avg` measured once on the input.
/// Survivor order is preserved.
pub fn prune(cloud: &GaussianCloud, cfg: &PruneConfig) -> Result<GaussianCloud> {
    cfg.validate()?;
    let positions = cloud.positions();
    let d_avg = mean_pairwise_distance(&positions)?;
    let nn = nearest_neighbor_distances(&positions);
    let limit = cfg.distance_factor * d_avg;

    let mut kept = Vec::with_capacity(cloud.len());
    for (kernel, nn_dist) in cloud.kernels.iter().zip(nn) {
        let axis = principal_axis_length(kernel)?;
        if axis <= cfg.max_axis && nn_dist <= limit {
            kept.push(kernel.clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::AllPruned);
    }
    Ok(GaussianCloud::new(kept))
}

/// Replaces each covariance by a sphere of equal volume, `R = det(Σ)^(1/6)`.
pub fn isotropize(cloud: &GaussianCloud) -> Result<IsotropicCloud> {
    let kernels = cloud
        .kernels
        .iter()
        .map(|k| {
            let eig = symmetric_eigenvalues(&k.covariance);
            if !eig.iter().all(|v| v.is_finite()) || eig[2] <= 0.0 {
                return Err(invalid("covariance is not positive definite"));
            }
            let det: f64 = eig.iter().product();
            Ok(IsotropicKernel {
                position: k.position,
                radius: det.powf(1.0 / 6.0),
                color: k.color,
                opacity: k.opacity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(IsotropicCloud::new(kernels))
}

/// Normalized centroid weights `R_i³ / Σ R_j³`.
pub fn centroid_weights(cloud: &IsotropicCloud) -> Result<Vec<f64>> {
    if cloud.is_empty() {
        return Err(Error::InsufficientPoints { needed: 1, got: 0 });
    }
    let cubes: Vec<f64> = cloud.kernels.iter().map(|k| k.radius.powi(3)).collect();
    let total: f64 = cubes.iter().sum();
    if !(total > 0.0) {
        return Err(invalid("radii must be positive"));
    }
    Ok(cubes.into_iter().map(|c| c / total).collect())
}

/// Volume-weighted centre of mass `Σ R_i³ μ_i / Σ R_i³`.
pub fn centroid(cloud: &IsotropicCloud) -> Result<Vec3> {
    let weights = centroid_weights(cloud)?;
    Ok(cloud
        .kernels
        .iter()
        .zip(weights)
        .fold(Vec3::zeros(), |acc, (k, w)| acc + k.position * w))
}

#[derive(Debug, Serialize, Deserialize)]
struct KernelRecord {
    pos: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov: Option<[f64; 9]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    rgb: [f64; 3],
    alpha: f64,
}

/// A cloud as read from disk; the kernel flavour is detected per file.
#[derive(Debug, Clone, PartialEq)]
pub enum CloudData {
    Anisotropic(GaussianCloud),
    Isotropic(IsotropicCloud),
}

impl CloudData {
    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<KernelRecord> = serde_json::from_str(text)?;
        if records.is_empty() {
            return Err(invalid("cloud file contains no kernels"));
        }
        let anisotropic = records[0].cov.is_some();
        if anisotropic {
            let kernels = records
                .iter()
                .map(|r| {
                    let cov = r.cov.ok_or_else(|| invalid("mixed kernel forms in cloud file"))?;
                    GaussianKernel::new(
                        Vec3::from(r.pos),
                        Matrix3::from_row_slice(&cov),
                        Vec3::from(r.rgb),
                        r.alpha,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CloudData::Anisotropic(GaussianCloud::new(kernels)))
        } else {
            let kernels = records
                .iter()
                .map(|r| {
                    let radius = r.radius.ok_or_else(|| invalid("kernel needs either cov or radius"))?;
                    IsotropicKernel::new(Vec3::from(r.pos), radius, Vec3::from(r.rgb), r.alpha)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CloudData::Isotropic(IsotropicCloud::new(kernels)))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<KernelRecord> = match self {
            CloudData::Anisotropic(c) => c
                .kernels
                .iter()
                .map(|k| {
                    let mut cov = [0.0; 9];
                    for r in 0..3 {
                        for c in 0..3 {
                            cov[r * 3 + c] = k.covariance[(r, c)];
                        }
                    }
                    KernelRecord {
                        pos: k.position.into(),
                        cov: Some(cov),
                        radius: None,
                        rgb: k.color.into(),
                        alpha: k.opacity,
                    }
                })
                .collect(),
            CloudData::Isotropic(c) => c
                .kernels
                .iter()
                .map(|k| KernelRecord {
                    pos: k.position.into(),
                    cov: None,
                    radius: Some(k.radius),
                    rgb: k.color.into(),
                    alpha: k.opacity,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&records)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Isotropic view of the cloud, isotropizing if needed.
    pub fn into_isotropic(self) -> Result<IsotropicCloud> {
        match self {
            CloudData::Anisotropic(c) => isotropize(&c),
            CloudData::Isotropic(c) => Ok(c),
        }
    }
}
