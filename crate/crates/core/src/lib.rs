//! Recovery of rigid projectile trajectories from monocular renders of a
//! Gaussian point cloud.
//!
//! The crate is organised bottom-up: [`gaussian`] and [`pose`] hold the
//! geometry, [`render`] the differentiable splatting renderer and its loss,
//! [`physics`], [`dsa`] and [`kalman`] the motion priors, [`simulator`] the
//! synthetic ground truth, [`recovery`] the tracking pipeline and
//! [`evaluation`] the metrics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dsa;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod kalman;
pub mod physics;
pub mod pose;
pub mod recovery;
pub mod render;
pub mod simulator;

pub use dsa::DsaConfig;
pub use error::{Error, Result};
pub use evaluation::{evaluate, CentroidTracks, MetricsReport};
pub use gaussian::{CloudData, GaussianCloud, IsotropicCloud, PruneConfig, Vec3};
pub use kalman::NoiseConfig;
pub use physics::PhysicsConfig;
pub use pose::{Pose, Quaternion, RegistrationTransform};
pub use recovery::{recover_sequence, track_sequence, Ablation, ControlInput, RecoveryConfig, RecoveryInput, TrajectoryResult};
pub use render::{Camera, LossWeights, Mask, RenderedImage};
pub use simulator::{simulate, SceneConfig, SimulatedScene};
