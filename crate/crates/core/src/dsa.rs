//! Displacement-adaptive learning-rate scheduling.
//!
//! The initial rate of each frame scales with the previous frame's
//! displacement relative to the smallest displacement seen so far, decays
//! exponentially within the frame, and the iteration budget grows with the
//! same ratio up to a cap.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsaConfig {
    /// Learning rate at the slowest frame.
    pub lr_base: f64,
    /// Iteration budget at the slowest frame.
    pub iter_base: usize,
    /// Final over initial learning rate within a frame.
    pub decay_floor_ratio: f64,
    /// Largest allowed budget multiple of `iter_base`.
    pub iter_cap_multiplier: f64,
}

impl Default for DsaConfig {
    fn default() -> Self {
        Self {
            lr_base: 1.0e-3,
            iter_base: 1000,
            decay_floor_ratio: 0.01,
            iter_cap_multiplier: 4.0,
        }
    }
}

impl DsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0) {
            return Err(invalid("lr_base must be positive"));
        }
        if self.iter_base < 1 {
            return Err(invalid("iter_base must be at least 1"));
        }
        if !(self.decay_floor_ratio > 0.0 && self.decay_floor_ratio < 1.0) {
            return Err(invalid("decay_floor_ratio must lie in (0, 1)"));
        }
        if !(self.iter_cap_multiplier >= 1.0) {
            return Err(invalid("iter_cap_multiplier must be at least 1"));
        }
        Ok(())
    }
}

fn check_displacements(displacement: f64, min_displacement: f64) -> Result<()> {
    if !(displacement >= 0.0) {
        return Err(invalid("displacement must be nonnegative"));
    }
    if !(min_displacement > 0.0) {
        return Err(invalid("reference displacement must be positive"));
    }
    Ok(())
}

/// Initial learning rate for a frame. A previous displacement of exactly
/// zero means no history and yields `lr_base`.
pub fn lr_init_for_frame(prev_displacement: f64, min_displacement: f64, cfg: &DsaConfig) -> Result<f64> {
    check_displacements(prev_displacement, min_displacement)?;
    if prev_displacement == 0.0 {
        return Ok(cfg.lr_base);
    }
    Ok(cfg.lr_base * (prev_displacement / min_displacement))
}

/// `lr_init · floor^(i / (total − 1))`.
pub fn lr_at_iteration(lr_init: f64, i: usize, total: usize, cfg: &DsaConfig) -> Result<f64> {
    if i >= total {
        return Err(invalid(format!("iteration {i} outside budget {total}")));
    }
    if total == 1 || i == 0 {
        return Ok(lr_init);
    }
    if i == total - 1 {
        return Ok(lr_init * cfg.decay_floor_ratio);
    }
    Ok(lr_init * cfg.decay_floor_ratio.powf(i as f64 / (total - 1) as f64))
}

/// Iteration budget `round(iter_base · min(d / d_min, cap))`, never below `iter_base`.
pub fn iterations_for_frame(displacement: f64, min_displacement: f64, cfg: &DsaConfig) -> Result<usize> {
    check_displacements(displacement, min_displacement)?;
    let ratio = (displacement / min_displacement).min(cfg.iter_cap_multiplier);
    let n = (cfg.iter_base as f64 * ratio).round() as usize;
    Ok(n.max(cfg.iter_base))
}

/// Running reference displacement owned by the sequential recovery loop.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DisplacementReference {
    min: Option<f64>,
    last: Option<f64>,
}

impl DisplacementReference {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a learned displacement. Zero displacements never become the reference.
    pub fn observe(&mut self, displacement: f64) {
        self.last = Some(displacement);
        if displacement > 0.0 {
            self.min = Some(self.min.map_or(displacement, |m| m.min(displacement)));
        }
    }

    pub fn min(&self) -> Option<f64> {
        self.min
    }

    pub fn last(&self) -> Option<f64> {
        self.last
    }

    /// Initial learning rate and iteration budget for the next frame.
    pub fn schedule(&self, cfg: &DsaConfig) -> Result<(f64, usize)> {
        match (self.last, self.min) {
            (Some(last), Some(min)) => Ok((lr_init_for_frame(last, min, cfg)?, iterations_for_frame(last, min, cfg)?)),
            _ => Ok((cfg.lr_base, cfg.iter_base)),
        }
    }
}
