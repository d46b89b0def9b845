//! Mutual-information registration of the compensated CT onto the
//! interventional CT: rigid search over a resolution pyramid, then an optional
//! B-spline refinement.
//!
//! All transforms here map fixed-image world points into the moving image.

mod bspline;
mod histogram;
mod rigid;

pub use bspline::register_bspline_mi;
pub use histogram::{
    entropy_bits, joint_histogram, mutual_information, mutual_information_counts, Binner, JointHistogram, PointMap,
    SampleSet,
};
pub use rigid::{register_rigid_mi, rigid_from_params, rigid_to_params};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transforms::{BSplineGrid, Rigid, TransformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("no fixed-image sample maps inside the moving image")]
    EmptyOverlap,
    #[error("only {accepted} of {drawn} samples overlap the moving image")]
    InsufficientOverlap { accepted: usize, drawn: usize },
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// How a moving intensity is credited to histogram bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinAccumulation {
    /// Whole count to the nearest bin centre.
    Nearest,
    /// Count split linearly between the two neighbouring bin centres, which
    /// makes the metric continuous in the transform parameters.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub bins: usize,
    /// Take every n-th fixed voxel along each axis at full resolution.
    pub sample_stride: usize,
    pub accumulation: BinAccumulation,
    /// Minimum fraction of drawn samples that must land inside the moving image.
    pub min_overlap_fraction: f64,

    pub pyramid_levels: usize,
    pub sweeps_per_level: usize,
    /// Half-width of the translation search bracket at the coarsest level (mm).
    pub translation_radius: f64,
    /// Half-width of the angle search bracket at the coarsest level (degrees).
    pub rotation_radius_deg: f64,
    /// Golden-section stopping width as a fraction of the bracket.
    pub golden_tolerance: f64,

    /// Control-point spacing (mm); `None` means 8 fixed-image voxels per axis.
    pub grid_spacing: Option<f64>,
    pub bspline_iterations: usize,
    /// Largest control-point update of the first gradient step (mm).
    pub bspline_step: f64,
    /// Per-iteration multiplier on the step.
    pub bspline_step_decay: f64,
    /// Central-difference half-width for control displacements (mm).
    pub bspline_fd_step: f64,
    pub bspline_sample_stride: usize,
    pub bspline_accumulation: BinAccumulation,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            bins: 32,
            sample_stride: 2,
            accumulation: BinAccumulation::Nearest,
            min_overlap_fraction: 0.25,
            pyramid_levels: 3,
            sweeps_per_level: 3,
            translation_radius: 8.0,
            rotation_radius_deg: 8.0,
            golden_tolerance: 0.01,
            grid_spacing: None,
            bspline_iterations: 30,
            bspline_step: 1.0,
            bspline_step_decay: 0.93,
            bspline_fd_step: 0.25,
            bspline_sample_stride: 2,
            bspline_accumulation: BinAccumulation::Linear,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: &str| Err(RegistrationError::InvalidConfig(m.to_string()));
        if self.bins < 2 || self.bins > u16::MAX as usize {
            return bad("bins must be in [2, 65535]");
        }
        if self.sample_stride == 0 || self.bspline_sample_stride == 0 {
            return bad("sample strides must be positive");
        }
        if !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction <= 1.0) {
            return bad("min_overlap_fraction must be in (0, 1]");
        }
        if self.pyramid_levels == 0 || self.sweeps_per_level == 0 {
            return bad("pyramid_levels and sweeps_per_level must be positive");
        }
        let positive = [
            self.translation_radius,
            self.rotation_radius_deg,
            self.golden_tolerance,
            self.bspline_step,
            self.bspline_step_decay,
            self.bspline_fd_step,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("radii, tolerances and steps must be positive");
        }
        if let Some(g) = self.grid_spacing {
            if !(g > 0.0 && g.is_finite()) {
                return bad("grid_spacing must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    /// Fixed world → moving world.
    pub final_transform: Rigid<f64>,
    /// Displacement field applied after `final_transform` (deformable stage only).
    pub grid: Option<BSplineGrid<f64>>,
    pub initial_mi: f64,
    pub final_mi: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best metric value so far, recorded after every optimizer pass.
    pub mi_trace: Vec<f64>,
}

/// Metric value or rejection when too few samples overlap.
fn overlap_ok(accepted: usize, drawn: usize, cfg: &RegistrationConfig) -> bool {
    accepted > 0 && accepted as f64 >= cfg.min_overlap_fraction * drawn as f64
}

fn check_initial_overlap(accepted: usize, drawn: usize, cfg: &RegistrationConfig) -> Result<(), RegistrationError> {
    if accepted == 0 {
        Err(RegistrationError::EmptyOverlap)
    } else if !overlap_ok(accepted, drawn, cfg) {
        Err(RegistrationError::InsufficientOverlap { accepted, drawn })
    } else {
        Ok(())
    }
}
