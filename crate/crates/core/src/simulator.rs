//! Synthetic projectile scenes: a procedural or loaded cloud thrown along a
//! constant-gravity parabola while spinning at a constant rate, rendered by
//! a fixed camera together with silhouettes and noisy centroid flow.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gaussian::{centroid, CloudData, GaussianCloud, GaussianKernel, IsotropicCloud, Vec3};
use crate::physics::PhysicsConfig;
use crate::pose::{apply_pose, read_pose_csv, write_pose_csv, Pose, Quaternion};
use crate::render::{project, splat_render, Camera, Mask, RenderedImage};

/// Salt separating the flow-noise streams from the cloud sampler.
const FLOW_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Where the object cloud comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObjectSource {
    Procedural { shape: String, count: usize },
    /// Cloud JSON file; relative paths resolve against the scene file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub object: ObjectSource,
    /// Initial velocity, world units per second.
    pub v0: Vec3,
    /// Body angular velocity, radians per second.
    pub omega: Vec3,
    pub physics: PhysicsConfig,
    pub camera: Camera,
    pub num_frames: usize,
    /// Standard deviation of the flow observations, pixels.
    pub flow_noise_std: f64,
    pub seed: u64,
}

impl SceneConfig {
    /// The desk-scale scene: a 96-kernel octant-coloured sphere of diameter
    /// about 1 thrown across a 128x128 view for 30 frames at 60 fps.
    pub fn desk() -> Self {
        let extrinsic = Pose::from_translation(Vec3::new(-0.6, 0.0, 3.5));
        Self {
            object: ObjectSource::Procedural {
                shape: "sphere".into(),
                count: 96,
            },
            v0: Vec3::new(2.4, -2.0, 0.0),
            omega: Vec3::new(0.8, 2.0, 0.5),
            physics: PhysicsConfig::default(),
            camera: Camera::new(128.0, Vector2::new(64.0, 64.0), 128, 128, extrinsic).expect("valid desk camera"),
            num_frames: 30,
            flow_noise_std: 1.0,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames < 3 {
            return Err(invalid("num_frames must be at least 3"));
        }
        if !(self.flow_noise_std >= 0.0 && self.flow_noise_std.is_finite()) {
            return Err(invalid("flow_noise_std must be finite and nonnegative"));
        }
        if self.v0.iter().chain(self.omega.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("v0 and omega must be finite"));
        }
        if let ObjectSource::Procedural { count, .. } = &self.object {
            if *count < 1 {
                return Err(invalid("object count must be at least 1"));
            }
        }
        if self.physics.gravity_mag.is_none() {
            return Err(invalid("simulation needs physics.gravity_mag"));
        }
        self.physics.validate()?;
        self.camera.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Builds the canonical object cloud. `base_dir` anchors relative paths.
    pub fn load_object(&self, base_dir: &Path) -> Result<CloudData> {
        match &self.object {
            ObjectSource::Procedural { shape, count } => {
                Ok(CloudData::Anisotropic(procedural_cloud(shape, *count, self.seed)?))
            }
            ObjectSource::File { path } => {
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                CloudData::load(full)
            }
        }
    }

    fn timestamp(&self, n: usize) -> f64 {
        n as f64 * self.physics.dt
    }
}

/// Ground-truth poses: parabolic translation and constant-rate spin.
pub fn generate_trajectory(cfg: &SceneConfig) -> Result<Vec<Pose>> {
    cfg.validate()?;
    let g = cfg.physics.gravity();
    Ok((0..cfg.num_frames)
        .map(|n| {
            let t = cfg.timestamp(n);
            let translation = cfg.v0 * t + g * (0.5 * t * t);
            Pose::new(Quaternion::from_rotation_vector(&(cfg.omega * t)), translation)
        })
        .collect())
}

/// Everything the simulator knows about a rendered sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSequence {
    pub poses: Vec<Pose>,
    pub images: Vec<RenderedImage>,
    pub masks: Vec<Mask>,
    /// Noisy centroid pixel displacement from the previous frame; zero at frame 0.
    pub flow: Vec<Vector2<f64>>,
    pub centroids: Vec<Vec3>,
}

impl GroundTruthSequence {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Renders every pose and derives silhouettes and flow observations.
pub fn synthesize_frames(cfg: &SceneConfig, trajectory: &[Pose], cloud: &IsotropicCloud) -> Result<GroundTruthSequence> {
    if cloud.is_empty() {
        return Err(invalid("cloud is empty"));
    }
    let body_centroid = centroid(cloud)?;
    let mut seq = GroundTruthSequence {
        poses: trajectory.to_vec(),
        images: Vec::with_capacity(trajectory.len()),
        masks: Vec::with_capacity(trajectory.len()),
        flow: Vec::with_capacity(trajectory.len()),
        centroids: Vec::with_capacity(trajectory.len()),
    };
    let mut prev_px: Option<Vector2<f64>> = None;
    for (n, pose) in trajectory.iter().enumerate() {
        let posed = apply_pose(pose, cloud)?;
        let image = splat_render(&posed, &cfg.camera);
        let mask = image.silhouette();
        if mask.area() == 0 {
            return Err(Error::OutOfView { frame: n });
        }
        let c = pose.transform_point(&body_centroid);
        let (px, _) = project(&c, &cfg.camera).map_err(|e| Error::Frame {
            frame: n,
            source: Box::new(e),
        })?;
        let flow = match prev_px {
            None => Vector2::zeros(),
            Some(prev) => {
                let mut rng = flow_rng(cfg.seed, n);
                let noise = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal));
                px - prev + noise * cfg.flow_noise_std
            }
        };
        prev_px = Some(px);
        seq.images.push(image);
        seq.masks.push(mask);
        seq.flow.push(flow);
        seq.centroids.push(c);
    }
    Ok(seq)
}

fn flow_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ FLOW_STREAM_SALT);
    rng.set_stream(frame as u64);
    rng
}

const OCTANT_COLORS: [[f64; 3]; 8] = [
    [0.90, 0.20, 0.15],
    [0.15, 0.75, 0.25],
    [0.20, 0.35, 0.90],
    [0.95, 0.85, 0.20],
    [0.85, 0.30, 0.85],
    [0.20, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.55, 0.55],
];

const PROCEDURAL_OPACITY: f64 = 0.9;

fn octant_color(p: &Vec3) -> Vec3 {
    let i = usize::from(p.x >= 0.0) | (usize::from(p.y >= 0.0) << 1) | (usize::from(p.z >= 0.0) << 2);
    Vec3::from(OCTANT_COLORS[i])
}

/// Jittered Fibonacci lattice on a sphere, rotated by a seeded phase.
fn sphere_points(n: usize, radius: f64, center: Vec3, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5.0_f64.sqrt());
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..n)
        .map(|i| {
            let jitter: f64 = rng.random_range(-0.25..0.25);
            let z = 1.0 - 2.0 * (i as f64 + 0.5 + jitter) / n as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let theta = golden * i as f64 + phase;
            center + radius * Vec3::new(rho * theta.cos(), rho * theta.sin(), z)
        })
        .collect()
}

fn box_points(n: usize, half: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let face = i % 6;
            let (a, b): (f64, f64) = (rng.random_range(-half..half), rng.random_range(-half..half));
            let s = if face % 2 == 0 { half } else { -half };
            match face / 2 {
                0 => Vec3::new(s, a, b),
                1 => Vec3::new(a, s, b),
                _ => Vec3::new(a, b, s),
            }
        })
        .collect()
}

/// `n` kernels on the surface of a unit-diameter shape, coloured by octant.
/// Kernel radius follows the mean surface spacing.
pub fn procedural_cloud(shape: &str, n: usize, seed: u64) -> Result<GaussianCloud> {
    if n < 1 {
        return Err(invalid("kernel count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (points, area) = match shape {
        "sphere" => (sphere_points(n, 0.5, Vec3::zeros(), &mut rng), PI),
        "box" => (box_points(n, 0.5, &mut rng), 6.0),
        "dumbbell" => {
            let left = n / 2;
            let mut pts = sphere_points(left, 0.3, Vec3::new(-0.4, 0.0, 0.0), &mut rng);
            pts.extend(sphere_points(n - left, 0.3, Vec3::new(0.4, 0.0, 0.0), &mut rng));
            (pts, 2.0 * 4.0 * PI * 0.09)
        }
        other => return Err(invalid(format!("unknown shape '{other}'"))),
    };
    let spacing = (area / n as f64).sqrt();
    let radius = 0.6 * spacing.min(0.5);
    let points = if n == 1 { vec![Vec3::zeros()] } else { points };
    let kernels = points
        .into_iter()
        .map(|p| {
            GaussianKernel::new(
                p,
                Matrix3::identity() * (radius * radius),
                octant_color(&p),
                PROCEDURAL_OPACITY,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianCloud::new(kernels))
}

/// A simulated scene: the canonical object plus its rendered sequence.
#[derive(Debug, Clone)]
pub struct SimulatedScene {
    pub config: SceneConfig,
    pub object: CloudData,
    pub sequence: GroundTruthSequence,
}

/// Builds the object, trajectory and frames of a scene.
pub fn simulate(cfg: &SceneConfig, base_dir: &Path) -> Result<SimulatedScene> {
    cfg.validate()?;
    let object = recentre(cfg.load_object(base_dir)?)?;
    let cloud = object.clone().into_isotropic()?;
    let trajectory = generate_trajectory(cfg)?;
    let sequence = synthesize_frames(cfg, &trajectory, &cloud)?;
    Ok(SimulatedScene {
        config: cfg.clone(),
        object,
        sequence,
    })
}

/// Shifts a cloud so its centroid sits at the body origin, making the spin
/// a rotation about the centre of mass.
pub fn recentre(object: CloudData) -> Result<CloudData> {
    let c = centroid(&object.clone().into_isotropic()?)?;
    Ok(match object {
        CloudData::Anisotropic(mut cloud) => {
            cloud.kernels.iter_mut().for_each(|k| k.position -= c);
            CloudData::Anisotropic(cloud)
        }
        CloudData::Isotropic(mut cloud) => {
            cloud.kernels.iter_mut().for_each(|k| k.position -= c);
            CloudData::Isotropic(cloud)
        }
    })
}

fn frame_name(n: usize) -> String {
    format!("{n:04}.png")
}

/// Writes a flow series as `frame,du,dv`.
pub fn write_flow_csv<W: Write>(writer: W, flow: &[Vector2<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "du", "dv"])?;
    for (n, f) in flow.iter().enumerate() {
        w.write_record([n.to_string(), format!("{:e}", f.x), format!("{:e}", f.y)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flow_csv<R: Read>(reader: R) -> Result<Vec<Vector2<f64>>> {
    let mut out = Vec::new();
    for (i, rec) in csv::Reader::from_reader(reader).deserialize::<(usize, f64, f64)>().enumerate() {
        let (frame, du, dv) = rec?;
        if frame != i {
            return Err(invalid(format!("flow row {i} labelled frame {frame}")));
        }
        out.push(Vector2::new(du, dv));
    }
    Ok(out)
}

/// Writes a 3-vector series as `frame,x,y,z`.
pub fn write_points_csv<W: Write>(writer: W, points: &[Vec3]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["frame", "x", "y", "z"])?;
    for (n, p) in points.iter().enumerate() {
        w.write_record([n.to_string(), format!("{:e}", p.x), format!("{:e}", p.y), format!("{:e}", p.z)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(reader: R) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, rec) in csv::Reader::from_reader(reader)
        .deserialize::<(usize, f64, f64, f64)>()
        .enumerate()
    {
        let (frame, x, y, z) = rec?;
        if frame != i {
            return Err(invalid(format!("row {i} labelled frame {frame}")));
        }
        out.push(Vec3::new(x, y, z));
    }
    Ok(out)
}

/// File names inside a scene directory.
pub mod layout {
    pub const FRAMES: &str = "frames";
    pub const MASKS: &str = "masks";
    pub const GT_POSES: &str = "gt_poses.csv";
    pub const GT_CENTROIDS: &str = "gt_centroids.csv";
    pub const FLOW: &str = "flow_obs.csv";
    pub const SCENE: &str = "scene.json";
    pub const OBJECT: &str = "object.json";
}

impl SimulatedScene {
    /// Writes frames, masks, poses, flow, centroids, the scene and the object.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join(layout::FRAMES))?;
        std::fs::create_dir_all(dir.join(layout::MASKS))?;
        for (n, (img, mask)) in self.sequence.images.iter().zip(&self.sequence.masks).enumerate() {
            img.save_png(dir.join(layout::FRAMES).join(frame_name(n)))?;
            mask.save_png(dir.join(layout::MASKS).join(frame_name(n)))?;
        }
        write_pose_csv(std::fs::File::create(dir.join(layout::GT_POSES))?, &self.sequence.poses)?;
        write_points_csv(std::fs::File::create(dir.join(layout::GT_CENTROIDS))?, &self.sequence.centroids)?;
        write_flow_csv(std::fs::File::create(dir.join(layout::FLOW))?, &self.sequence.flow)?;
        let mut config = self.config.clone();
        config.object = ObjectSource::File {
            path: PathBuf::from(layout::OBJECT),
        };
        std::fs::write(dir.join(layout::SCENE), config.to_json()?)?;
        self.object.save(dir.join(layout::OBJECT))?;
        Ok(())
    }

    /// Reads a directory written by [`Self::save`]. Images come back
    /// quantized to 8 bits.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config = SceneConfig::load(dir.join(layout::SCENE))?;
        let object = config.load_object(dir)?;
        let poses = read_pose_csv(std::fs::File::open(dir.join(layout::GT_POSES))?)?;
        let centroids = read_points_csv(std::fs::File::open(dir.join(layout::GT_CENTROIDS))?)?;
        let flow = read_flow_csv(std::fs::File::open(dir.join(layout::FLOW))?)?;
        let n = poses.len();
        if centroids.len() != n || flow.len() != n || n != config.num_frames {
            return Err(invalid("scene directory files disagree on frame count"));
        }
        let images = (0..n)
            .map(|i| RenderedImage::load_png(dir.join(layout::FRAMES).join(frame_name(i))))
            .collect::<Result<Vec<_>>>()?;
        let masks = (0..n)
            .map(|i| Mask::load_png(dir.join(layout::MASKS).join(frame_name(i))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            object,
            sequence: GroundTruthSequence {
                poses,
                images,
                masks,
                flow,
                centroids,
            },
        })
    }
}
