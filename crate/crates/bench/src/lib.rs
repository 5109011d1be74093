//! Shared fixtures for the benchmarks: the default desk scene and a pose a
//! little off the ground truth, so losses and gradients are non-trivial.

use std::path::Path;

use splatraj_core::pose::apply_pose;
use splatraj_core::render::PhotometricTarget;
use splatraj_core::{simulate, Camera, IsotropicCloud, Pose, RenderedImage, SceneConfig, Vec3};

pub struct Fixture {
    pub camera: Camera,
    pub cloud: IsotropicCloud,
    pub target: RenderedImage,
    pub pose: Pose,
}

impl Fixture {
    pub fn desk() -> Self {
        let scene = SceneConfig::desk();
        let sim = simulate(&scene, Path::new(".")).expect("desk scene simulates");
        let frame = 5;
        let truth = &sim.sequence.poses[frame];
        Self {
            camera: scene.camera.clone(),
            cloud: sim.object.into_isotropic().expect("isotropic object"),
            target: sim.sequence.images[frame].clone(),
            pose: Pose::new(truth.rotation, truth.translation + Vec3::new(0.01, -0.005, 0.0)),
        }
    }

    pub fn posed_cloud(&self) -> IsotropicCloud {
        apply_pose(&self.pose, &self.cloud).expect("finite pose")
    }

    pub fn photometric_target(&self) -> PhotometricTarget {
        PhotometricTarget::new(self.target.clone(), 0.2).expect("valid lambda")
    }
}
