//! Biopsy path planning and live needle-versus-plan guidance metrics.
//!
//! Plans live in interventional-CT world coordinates. The guidance chain maps
//! the calibrated tip through the tracked pose and the tracker→image
//! registration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pivot::PoseSample;
use crate::scalar::{Real, Vec3};
use crate::transforms::Rigid;

/// Minimum entry-to-target distance (mm).
pub const MIN_PLAN_LENGTH: f64 = 1.0;
/// Guidance is invalid once the latest pose is older than this (s).
pub const STALENESS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("entry and target are {0:.3} mm apart; need more than 1 mm")]
    Degenerate(f64),
    #[error("path sampling step must be positive")]
    BadStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BiopsyPlan<T: Real> {
    #[serde(with = "crate::serde_vec3")]
    pub entry: Vec3<T>,
    #[serde(with = "crate::serde_vec3")]
    pub target: Vec3<T>,
    #[serde(with = "crate::serde_vec3")]
    pub direction: Vec3<T>,
    pub length: T,
}

pub fn make_plan<T: Real>(entry: Vec3<T>, target: Vec3<T>) -> Result<BiopsyPlan<T>, PlanError> {
    let d = target - entry;
    let length = d.norm();
    if !(length > T::lit(MIN_PLAN_LENGTH)) {
        return Err(PlanError::Degenerate(length.as_f64()));
    }
    Ok(BiopsyPlan { entry, target, direction: d / length, length })
}

impl<T: Real> BiopsyPlan<T> {
    /// Points every `step` mm from entry, always ending exactly at the target.
    pub fn sample_path(&self, step: T) -> Result<Vec<Vec3<T>>, PlanError> {
        if !(step > T::zero()) {
            return Err(PlanError::BadStep);
        }
        let mut pts = Vec::new();
        let mut k = 0usize;
        loop {
            let s = step * T::lit(k as f64);
            // stop at the target; steps landing within rounding of it are folded into it
            if s >= self.length - T::lit(1e-9) * self.length {
                break;
            }
            pts.push(self.entry + self.direction * s);
            k += 1;
        }
        pts.push(self.target);
        Ok(pts)
    }

    /// Signed distance from `p` to the target along the plan direction.
    pub fn depth_remaining(&self, p: &Vec3<T>) -> T {
        (self.target - p).dot(&self.direction)
    }

    /// Distance from `p` to the infinite plan line.
    pub fn lateral_deviation(&self, p: &Vec3<T>) -> T {
        let v = p - self.entry;
        (v - self.direction * v.dot(&self.direction)).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GuidanceState<T: Real> {
    #[serde(with = "crate::serde_vec3")]
    pub tip_image: Vec3<T>,
    pub depth_remaining: T,
    pub lateral_deviation: T,
    /// Degrees in [0, 180].
    pub angle_deviation: T,
    pub pose_age: f64,
    pub valid: bool,
}

/// Needle axis in the sensor frame: along the tip offset, or +z when uncalibrated.
pub fn needle_axis<T: Real>(tip_offset: &Vec3<T>) -> Vec3<T> {
    let n = tip_offset.norm();
    if n > T::lit(1e-9) {
        tip_offset / n
    } else {
        Vec3::z()
    }
}

/// Calibrated tip position mapped into image coordinates.
pub fn tip_in_image<T: Real>(pose: &PoseSample<T>, tip_offset: &Vec3<T>, tracker_to_image: &Rigid<T>) -> Vec3<T> {
    tracker_to_image.apply(&pose.apply(tip_offset))
}

pub fn compute_guidance<T: Real>(
    plan: &BiopsyPlan<T>,
    pose: &PoseSample<T>,
    tip_offset: &Vec3<T>,
    tracker_to_image: &Rigid<T>,
    now: f64,
) -> GuidanceState<T> {
    let tip_image = tip_in_image(pose, tip_offset, tracker_to_image);
    let axis = tracker_to_image.apply_vector(&(pose.rotation * needle_axis(tip_offset)));
    let cos = (axis.dot(&plan.direction) / axis.norm()).clamp(-T::one(), T::one());
    let pose_age = now - pose.timestamp;
    GuidanceState {
        tip_image,
        depth_remaining: plan.depth_remaining(&tip_image),
        lateral_deviation: plan.lateral_deviation(&tip_image),
        angle_deviation: cos.acos() * T::lit(180.0) / T::pi(),
        pose_age,
        valid: pose_age <= STALENESS_THRESHOLD,
    }
}
