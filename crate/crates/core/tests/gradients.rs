//! Analytic photometric gradients against central differences.
//!
//! The photometric loss has an L1 term and depth-sorted compositing, so it
//! has kinks where a rendered pixel crosses its target and jumps where two
//! splats swap depth order. Central differences only measure the derivative
//! when the stencil straddles none of these, which needs a small step.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatraj_core::SceneConfig;

const STEP: f64 = 1e-7;

#[test]
fn pose_gradient_matches_central_differences() {
    let scene = common::run_scene(&SceneConfig::desk());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..20 {
        let e = common::pose_gradient_case(&scene, &mut rng, STEP, 0.0);
        assert!(e < 1e-3, "case {case}: worst relative error {e:.3e}");
    }
}

#[test]
fn registration_gradient_matches_central_differences() {
    let scene = common::run_scene(&SceneConfig::desk());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10 {
        let e = common::registration_gradient_case(&scene, &mut rng, STEP, 0.0);
        assert!(e < 1e-3, "case {case}: worst relative error {e:.3e}");
    }
}

#[test]
fn reduced_scene_gradients_agree() {
    let scene = common::run_scene(&common::reduced_desk(64, 40, 6));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..10 {
        let e = common::pose_gradient_case(&scene, &mut rng, STEP, 0.0);
        assert!(e < 1e-3, "case {case}: worst relative error {e:.3e}");
    }
}
