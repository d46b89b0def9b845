//! Core numerics for PET/CT-guided needle navigation: volumes and NRRD I/O,
//! rigid and B-spline transforms, landmark and mutual-information
//! registration, pivot calibration, a synthetic phantom, and biopsy
//! planning/guidance metrics.
//!
//! Geometry (`transforms`, `landmark`, `pivot`, `planning`) is generic over
//! [`Real`] (`f32` or `f64`); the aliases below fix it to `f64`, with `…F32`
//! variants where single precision is useful. Volumes, the MI metric and the
//! phantom work in `f64` throughout.

pub mod intensity;
pub mod landmark;
pub mod nrrd;
pub mod phantom;
pub mod pivot;
pub mod planning;
pub mod scalar;
pub mod serde_vec3;
pub mod transforms;
pub mod volume;

pub use scalar::{Mat3, Real, Vec3};

pub type Vector3 = scalar::Vec3<f64>;
pub type Matrix3 = scalar::Mat3<f64>;

pub type RigidTransform = transforms::Rigid<f64>;
pub type RigidTransformF32 = transforms::Rigid<f32>;
pub type BSplineGrid = transforms::BSplineGrid<f64>;
pub type DeformableTransform = transforms::Deformable<f64>;

pub type LandmarkPair = landmark::LandmarkPair<f64>;
pub type LandmarkPairF32 = landmark::LandmarkPair<f32>;
pub type LandmarkRegistration = landmark::LandmarkRegistration<f64>;

pub type PoseSample = pivot::PoseSample<f64>;
pub type PoseSampleF32 = pivot::PoseSample<f32>;
pub type PivotResult = pivot::PivotResult<f64>;
pub type PivotBuffer = pivot::PivotBuffer<f64>;

pub type BiopsyPlan = planning::BiopsyPlan<f64>;
pub type GuidanceState = planning::GuidanceState<f64>;

pub use intensity::{JointHistogram, RegistrationConfig, RegistrationReport};
pub use phantom::{GroundTruth, PhantomConfig};
pub use volume::{Modality, ScalarType, Volume};
