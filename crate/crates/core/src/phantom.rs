//! Procedural stand-in for a respiring torso phantom with a hot target vial:
//! the three study volumes, breathing motion, tracked needle poses and
//! fiducial touches, all with known ground truth.
//!
//! Anatomy is defined analytically in the compensated-CT frame. The PET
//! shares that frame; the interventional CT sees the same anatomy moved by
//! `interventional_offset`, and is evaluated analytically at each of its own
//! voxels rather than resampled from the compensated CT grid.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pivot::PoseSample;
use crate::planning::needle_axis;
use crate::scalar::{axis_angle, Mat3, Vec3};
use crate::transforms::Rigid;
use crate::volume::{Modality, ScalarType, Volume, VolumeError};

const AIR_HU: f64 = -1000.0;
const TISSUE_HU: f64 = 40.0;
const LUNG_HU: f64 = -800.0;
const LIVER_HU: f64 = 65.0;
const LESION_CT_CONTRAST: f64 = 15.0;
const BONE_HU: f64 = 500.0;
const RIB_HU: f64 = 600.0;
const FIDUCIAL_HU: f64 = 1500.0;
const FIDUCIAL_RADIUS: f64 = 3.0;
/// Edge half-width of the smooth tissue boundaries (mm).
const EDGE: f64 = 2.0;
/// Fiducials must lie within this distance of the body surface (mm).
const SURFACE_TOL: f64 = 5.0;

const PET_BODY: f64 = 0.5;
const PET_LIVER: f64 = 1.0;
const PET_LESION: f64 = 10.0;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Invalid(String),
    #[error("ground truth inconsistent: {0}")]
    Inconsistent(String),
    #[error("truth file: {0}")]
    Parse(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl GridSpec {
    /// Axis-aligned grid centred on the world origin.
    fn origin(&self) -> Vec3<f64> {
        Vec3::from_fn(|a, _| -((self.dims[a] - 1) as f64) * self.spacing[a] / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub ct: GridSpec,
    pub pet: GridSpec,
    pub interventional: GridSpec,
    /// Body ellipsoid semi-axes (mm), centred at the origin of the compensated-CT frame.
    pub body_semi_axes: [f64; 3],
    /// Compensated-CT frame.
    pub lesion_center: [f64; 3],
    pub lesion_radius: f64,
    pub respiration_rate: f64,
    pub respiration_amplitude: f64,
    /// Adds breathing motion to streamed tip positions.
    pub respiration_enabled: bool,
    /// True compensated-CT → interventional-CT map.
    pub interventional_offset: Rigid<f64>,
    /// True tracker → interventional-CT map.
    pub tracker_to_image: Rigid<f64>,
    /// Needle tip in the sensor frame.
    pub tip_offset: [f64; 3],
    /// Skin markers, interventional-CT frame.
    pub fiducials: Vec<[f64; 3]>,
    pub pose_noise_sigma: f64,
    pub stream_rate: f64,
    pub seed: u64,
}

fn surface_point(semi: [f64; 3], theta_deg: f64, phi_deg: f64) -> Vec3<f64> {
    let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
    Vec3::new(semi[0] * t.cos() * p.cos(), semi[1] * t.sin() * p.cos(), semi[2] * p.sin())
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let body_semi_axes = [75.0, 55.0, 80.0];
        let interventional_offset =
            Rigid::about_center(axis_angle(&Vec3::new(0.2, -0.3, 1.0), 3f64.to_radians()), Vec3::zeros(), Vec3::new(5.0, -3.5, 4.0));
        let fiducials = [(10.0, 20.0), (125.0, -25.0), (235.0, 15.0), (290.0, -40.0)]
            .iter()
            .map(|&(t, p)| interventional_offset.apply(&surface_point(body_semi_axes, t, p)).into())
            .collect();
        Self {
            ct: GridSpec { dims: [64; 3], spacing: [3.0, 3.0, 4.0] },
            pet: GridSpec { dims: [64; 3], spacing: [6.0, 6.0, 2.25] },
            interventional: GridSpec { dims: [64; 3], spacing: [2.94, 2.94, 3.0] },
            body_semi_axes,
            lesion_center: [30.0, 0.0, -10.0],
            lesion_radius: 10.0,
            respiration_rate: 12.0,
            respiration_amplitude: 10.0,
            respiration_enabled: false,
            interventional_offset,
            tracker_to_image: Rigid::from_axis_angle(
                Vec3::new(1.0, 2.0, 3.0),
                30f64.to_radians(),
                Vec3::new(-150.0, 80.0, 200.0),
            ),
            tip_offset: [0.0, 0.0, 100.0],
            fiducials,
            pose_noise_sigma: 0.0,
            stream_rate: 20.0,
            seed: 42,
        }
    }
}

impl PhantomConfig {
    /// Grids at the clinical scan sizes instead of the 64³ desk scale.
    pub fn full_size(mut self) -> Self {
        self.ct = GridSpec { dims: [512, 512, 127], spacing: [1.5, 1.5, 2.0] };
        self.pet = GridSpec { dims: [200, 200, 170], spacing: [4.0, 4.0, 1.5] };
        self.interventional = GridSpec { dims: [512, 512, 315], spacing: [0.98, 0.98, 1.0] };
        self
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::Invalid(m));
        for (name, g) in [("ct", &self.ct), ("pet", &self.pet), ("interventional", &self.interventional)] {
            if g.dims.iter().any(|&d| d < 2) || g.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return bad(format!("{name} grid needs dims >= 2 and positive spacing"));
            }
        }
        if self.body_semi_axes.iter().any(|&a| !(a > 0.0)) {
            return bad("body semi-axes must be positive".into());
        }
        let positive = [self.lesion_radius, self.respiration_rate, self.respiration_amplitude, self.stream_rate];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("lesion radius, respiration rate/amplitude and stream rate must be positive".into());
        }
        if !(self.pose_noise_sigma >= 0.0 && self.pose_noise_sigma.is_finite()) {
            return bad("pose_noise_sigma must be non-negative".into());
        }
        self.interventional_offset.validate().map_err(|e| PhantomError::Invalid(format!("interventional_offset: {e}")))?;
        self.tracker_to_image.validate().map_err(|e| PhantomError::Invalid(format!("tracker_to_image: {e}")))?;
        let anatomy = Anatomy::new(self);
        let lesion = Vec3::from(self.lesion_center);
        if anatomy.body_distance(&lesion) > -self.lesion_radius {
            return bad("lesion must lie inside the body".into());
        }
        if self.fiducials.len() < 4 {
            return bad(format!("need at least 4 fiducials, got {}", self.fiducials.len()));
        }
        let to_comp = self.interventional_offset.inverse();
        for (n, f) in self.fiducials.iter().enumerate() {
            let d = anatomy.body_distance(&to_comp.apply(&Vec3::from(*f)));
            if d.abs() > SURFACE_TOL {
                return bad(format!("fiducial {} is {d:.1} mm from the body surface", n + 1));
            }
        }
        Ok(())
    }
}

/// Smooth inside indicator: 1 deep inside, 0 outside, 0.5 on the boundary.
fn inside(signed_distance: f64, edge: f64) -> f64 {
    0.5 * (1.0 - (signed_distance / edge).tanh())
}

/// Approximate signed distance to an axis-aligned ellipsoid.
fn ellipsoid_distance(p: &Vec3<f64>, center: &Vec3<f64>, semi: &Vec3<f64>) -> f64 {
    let q = (p - center).component_div(semi).norm();
    (q - 1.0) * semi.min()
}

struct Anatomy {
    body: Vec3<f64>,
    lesion: Vec3<f64>,
    lesion_radius: f64,
    liver_center: Vec3<f64>,
    liver_semi: Vec3<f64>,
    lungs: [Vec3<f64>; 2],
    lung_semi: Vec3<f64>,
    fiducials: Vec<Vec3<f64>>,
}

impl Anatomy {
    fn new(cfg: &PhantomConfig) -> Self {
        let b = Vec3::from(cfg.body_semi_axes);
        let to_comp = cfg.interventional_offset.inverse();
        Self {
            body: b,
            lesion: Vec3::from(cfg.lesion_center),
            lesion_radius: cfg.lesion_radius,
            liver_center: Vec3::new(0.33 * b.x, -0.1 * b.y, -0.2 * b.z),
            liver_semi: Vec3::new(0.47 * b.x, 0.55 * b.y, 0.4 * b.z),
            lungs: [Vec3::new(0.45 * b.x, 0.05 * b.y, 0.45 * b.z), Vec3::new(-0.45 * b.x, 0.05 * b.y, 0.45 * b.z)],
            lung_semi: Vec3::new(0.3 * b.x, 0.55 * b.y, 0.4 * b.z),
            fiducials: cfg.fiducials.iter().map(|f| to_comp.apply(&Vec3::from(*f))).collect(),
        }
    }

    fn body_distance(&self, p: &Vec3<f64>) -> f64 {
        ellipsoid_distance(p, &Vec3::zeros(), &self.body)
    }

    /// Hounsfield units at a compensated-CT world point.
    fn ct(&self, p: &Vec3<f64>) -> f64 {
        let body = inside(self.body_distance(p), EDGE);
        let mut v = AIR_HU + (TISSUE_HU - AIR_HU) * body;
        for c in &self.lungs {
            v += (LUNG_HU - TISSUE_HU) * body * inside(ellipsoid_distance(p, c, &self.lung_semi), EDGE);
        }
        v += (LIVER_HU - TISSUE_HU) * inside(ellipsoid_distance(p, &self.liver_center, &self.liver_semi), EDGE);
        v += LESION_CT_CONTRAST * inside((p - self.lesion).norm() - self.lesion_radius, 1.0);

        // spine: posterior cylinder along z
        let spine = Vec3::new(0.0, 0.7 * self.body.y, 0.0);
        let r = ((p.x - spine.x).powi(2) + (p.y - spine.y).powi(2)).sqrt();
        let bone = inside(r - 10.0, 1.5) * inside(p.z.abs() - 0.9 * self.body.z, EDGE);
        v += (BONE_HU - v) * bone;

        // ribs: periodic bands in a shell just under the skin
        let q = (p.component_div(&self.body)).norm();
        let shell = inside((q - 0.92) * self.body.min(), 1.5) * inside((0.84 - q) * self.body.min(), 1.5);
        let band = inside(0.6 - (2.0 * PI * p.z / 25.0).cos(), 0.1);
        let upper = inside(-p.z - 0.2 * self.body.z, EDGE);
        v += (RIB_HU - v) * shell * band * upper;

        for f in &self.fiducials {
            v += (FIDUCIAL_HU - v) * inside((p - f).norm() - FIDUCIAL_RADIUS, 0.75);
        }
        v
    }

    /// Relative tracer uptake at a compensated-CT world point.
    fn pet(&self, p: &Vec3<f64>) -> f64 {
        let body = inside(self.body_distance(p), EDGE);
        let liver = inside(ellipsoid_distance(p, &self.liver_center, &self.liver_semi), EDGE);
        let lesion = inside((p - self.lesion).norm() - self.lesion_radius, 1.0);
        PET_BODY * body + (PET_LIVER - PET_BODY) * liver * body + (PET_LESION - PET_LIVER) * lesion
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub interventional_offset: Rigid<f64>,
    pub tracker_to_image: Rigid<f64>,
    #[serde(with = "crate::serde_vec3")]
    pub tip_offset: Vec3<f64>,
    #[serde(with = "crate::serde_vec3")]
    pub lesion_comp: Vec3<f64>,
    #[serde(with = "crate::serde_vec3")]
    pub lesion_image: Vec3<f64>,
    #[serde(with = "crate::serde_vec3")]
    pub lesion_tracker: Vec3<f64>,
    #[serde(with = "crate::serde_vec3::list")]
    pub fiducials_image: Vec<Vec3<f64>>,
    #[serde(with = "crate::serde_vec3::list")]
    pub fiducials_tracker: Vec<Vec3<f64>>,
}

impl GroundTruth {
    pub fn from_config(cfg: &PhantomConfig) -> Self {
        let lesion_comp = Vec3::from(cfg.lesion_center);
        let lesion_image = cfg.interventional_offset.apply(&lesion_comp);
        let to_tracker = cfg.tracker_to_image.inverse();
        let fiducials_image: Vec<_> = cfg.fiducials.iter().map(|f| Vec3::from(*f)).collect();
        Self {
            interventional_offset: cfg.interventional_offset,
            tracker_to_image: cfg.tracker_to_image,
            tip_offset: Vec3::from(cfg.tip_offset),
            lesion_comp,
            lesion_image,
            lesion_tracker: to_tracker.apply(&lesion_image),
            fiducials_tracker: fiducials_image.iter().map(|f| to_tracker.apply(f)).collect(),
            fiducials_image,
        }
    }

    pub fn check_consistency(&self) -> Result<(), PhantomError> {
        let tol = 1e-9;
        let close = |a: &Vec3<f64>, b: &Vec3<f64>| (a - b).norm() <= tol * (1.0 + a.norm());
        if !close(&self.interventional_offset.apply(&self.lesion_comp), &self.lesion_image) {
            return Err(PhantomError::Inconsistent("lesion_image != offset(lesion_comp)".into()));
        }
        if !close(&self.tracker_to_image.apply(&self.lesion_tracker), &self.lesion_image) {
            return Err(PhantomError::Inconsistent("lesion_image != tracker_to_image(lesion_tracker)".into()));
        }
        if self.fiducials_image.len() != self.fiducials_tracker.len() {
            return Err(PhantomError::Inconsistent("fiducial lists differ in length".into()));
        }
        for (i, t) in self.fiducials_image.iter().zip(&self.fiducials_tracker) {
            if !close(&self.tracker_to_image.apply(t), i) {
                return Err(PhantomError::Inconsistent("fiducial image/tracker pair mismatch".into()));
            }
        }
        Ok(())
    }

    /// Plain `key = numbers…` lines; rigid maps are 9 row-major rotation
    /// entries followed by the translation.
    pub fn to_text(&self) -> String {
        let nums = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        out += &format!("interventional_offset = {}\n", nums(&self.interventional_offset.to_array()));
        out += &format!("tracker_to_image = {}\n", nums(&self.tracker_to_image.to_array()));
        out += &format!("tip_offset = {}\n", nums(self.tip_offset.as_slice()));
        out += &format!("lesion_comp = {}\n", nums(self.lesion_comp.as_slice()));
        out += &format!("lesion_image = {}\n", nums(self.lesion_image.as_slice()));
        out += &format!("lesion_tracker = {}\n", nums(self.lesion_tracker.as_slice()));
        for (n, (i, t)) in self.fiducials_image.iter().zip(&self.fiducials_tracker).enumerate() {
            out += &format!("fiducial_{} = {} {}\n", n + 1, nums(i.as_slice()), nums(t.as_slice()));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, PhantomError> {
        let mut fields = std::collections::BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PhantomError::Parse(format!("line {}: expected key = values", n + 1)))?;
            let values = v
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PhantomError::Parse(format!("line {}: {e}", n + 1)))?;
            fields.insert(k.trim().to_string(), values);
        }
        let get = |k: &str, len: usize| -> Result<Vec<f64>, PhantomError> {
            let v = fields.get(k).ok_or_else(|| PhantomError::Parse(format!("missing {k}")))?;
            if v.len() != len {
                return Err(PhantomError::Parse(format!("{k}: expected {len} numbers, got {}", v.len())));
            }
            Ok(v.clone())
        };
        let rigid = |k: &str| -> Result<Rigid<f64>, PhantomError> {
            Rigid::from_slice(&get(k, 12)?).map_err(|e| PhantomError::Parse(format!("{k}: {e}")))
        };
        let vec3 = |k: &str| -> Result<Vec3<f64>, PhantomError> { Ok(Vec3::from_column_slice(&get(k, 3)?)) };
        let mut fiducials_image = Vec::new();
        let mut fiducials_tracker = Vec::new();
        for n in 1.. {
            let key = format!("fiducial_{n}");
            if !fields.contains_key(&key) {
                break;
            }
            let v = get(&key, 6)?;
            fiducials_image.push(Vec3::from_column_slice(&v[..3]));
            fiducials_tracker.push(Vec3::from_column_slice(&v[3..]));
        }
        let truth = Self {
            interventional_offset: rigid("interventional_offset")?,
            tracker_to_image: rigid("tracker_to_image")?,
            tip_offset: vec3("tip_offset")?,
            lesion_comp: vec3("lesion_comp")?,
            lesion_image: vec3("lesion_image")?,
            lesion_tracker: vec3("lesion_tracker")?,
            fiducials_image,
            fiducials_tracker,
        };
        truth.check_consistency()?;
        Ok(truth)
    }
}

pub struct PhantomVolumes {
    pub comp_ct: Volume,
    pub comp_pet: Volume,
    pub interventional_ct: Volume,
    pub truth: GroundTruth,
}

pub fn generate_phantom(cfg: &PhantomConfig) -> Result<PhantomVolumes, PhantomError> {
    cfg.validate()?;
    let anatomy = Anatomy::new(cfg);
    let build = |g: &GridSpec, modality, scalar, f: &dyn Fn(&Vec3<f64>) -> f64| {
        Volume::from_fn(g.dims, Vec3::from(g.spacing), g.origin(), Mat3::identity(), modality, scalar, |p| f(&p))
    };
    let comp_ct = build(&cfg.ct, Modality::Ct, ScalarType::Int16, &|p| anatomy.ct(p))?;
    let comp_pet = build(&cfg.pet, Modality::Pet, ScalarType::Float32, &|p| anatomy.pet(p))?;
    let to_comp = cfg.interventional_offset.inverse();
    let interventional_ct =
        build(&cfg.interventional, Modality::InterventionalCt, ScalarType::Int16, &|p| anatomy.ct(&to_comp.apply(p)))?;
    let truth = GroundTruth::from_config(cfg);
    truth.check_consistency()?;
    Ok(PhantomVolumes { comp_ct, comp_pet, interventional_ct, truth })
}

/// Superior-inferior diaphragm displacement (mm): raised cosine, zero at end expiration.
pub fn respiration_displacement(t: f64, rate: f64, amplitude: f64) -> f64 {
    amplitude * (1.0 - (2.0 * PI * rate * t / 60.0).cos()) / 2.0
}

/// Needle tip path in interventional-CT coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Tip held still, shaft along `direction` (tip-ward).
    Static { tip: [f64; 3], direction: [f64; 3], duration: f64 },
    /// Tip seated at `pivot` while the shaft sweeps a cone of varying tilt
    /// (up to `max_tilt_deg`) around `axis`, rolling as it goes.
    Pivot { pivot: [f64; 3], axis: [f64; 3], max_tilt_deg: f64, duration: f64 },
    /// Straight insertion from `entry` to `target`.
    Linear { entry: [f64; 3], target: [f64; 3], duration: f64 },
}

/// Tip position, shaft direction (unit, pointing toward the tip) and roll about the shaft.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub tip: Vec3<f64>,
    pub direction: Vec3<f64>,
    pub roll: f64,
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        match self {
            Self::Static { duration, .. } | Self::Pivot { duration, .. } | Self::Linear { duration, .. } => *duration,
        }
    }

    pub fn state(&self, t: f64) -> TrajectoryState {
        match self {
            Self::Static { tip, direction, .. } => {
                TrajectoryState { tip: Vec3::from(*tip), direction: Vec3::from(*direction).normalize(), roll: 0.0 }
            }
            Self::Pivot { pivot, axis, max_tilt_deg, duration } => {
                let axis = Vec3::from(*axis).normalize();
                let s = if *duration > 0.0 { t / duration } else { 0.0 };
                let azimuth = 2.0 * PI * 3.0 * s;
                let tilt = max_tilt_deg.to_radians() * (0.55 + 0.45 * (2.0 * PI * 2.3 * s).sin());
                let (u, w) = orthonormal_pair(&axis);
                let direction = axis * tilt.cos() + (u * azimuth.cos() + w * azimuth.sin()) * tilt.sin();
                TrajectoryState { tip: Vec3::from(*pivot), direction, roll: 0.6 * (2.0 * PI * 1.7 * s).sin() }
            }
            Self::Linear { entry, target, duration } => {
                let (e, g) = (Vec3::from(*entry), Vec3::from(*target));
                let s = if *duration > 0.0 { (t / duration).clamp(0.0, 1.0) } else { 1.0 };
                TrajectoryState { tip: e + (g - e) * s, direction: (g - e).normalize(), roll: 0.0 }
            }
        }
    }
}

fn orthonormal_pair(n: &Vec3<f64>) -> (Vec3<f64>, Vec3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

/// Proper rotation taking unit `a` onto unit `b`.
fn rotation_between(a: &Vec3<f64>, b: &Vec3<f64>) -> Mat3<f64> {
    let c = a.dot(b).clamp(-1.0, 1.0);
    let axis = a.cross(b);
    if axis.norm() > 1e-12 {
        axis_angle(&axis, c.acos())
    } else if c > 0.0 {
        Mat3::identity()
    } else {
        axis_angle(&orthonormal_pair(a).0, PI)
    }
}

/// Sensor pose (tracker frame) that puts the calibrated tip at `state.tip` in
/// image space with the shaft along `state.direction`.
pub fn pose_for_tip(truth: &GroundTruth, state: &TrajectoryState, timestamp: f64) -> PoseSample<f64> {
    let to_tracker = truth.tracker_to_image.inverse();
    let tip_tracker = to_tracker.apply(&state.tip);
    let dir_tracker = to_tracker.apply_vector(&state.direction);
    let local_axis = needle_axis(&truth.tip_offset);
    let rotation = axis_angle(&dir_tracker, state.roll) * rotation_between(&local_axis, &dir_tracker);
    PoseSample::new(rotation, tip_tracker - rotation * truth.tip_offset, timestamp)
}

/// One pose per tick at `cfg.stream_rate` over the trajectory's duration,
/// timestamps starting at `t0`. Breathing is added to the tip along +z when
/// enabled; Gaussian noise of `cfg.pose_noise_sigma` is added per position axis.
pub fn stream_needle_poses(cfg: &PhantomConfig, trajectory: &Trajectory, t0: f64) -> Vec<PoseSample<f64>> {
    let truth = GroundTruth::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.pose_noise_sigma.max(0.0)).expect("finite sigma");
    let ticks = (trajectory.duration() * cfg.stream_rate).floor() as usize + 1;
    (0..ticks)
        .map(|k| {
            let t = k as f64 / cfg.stream_rate;
            let mut state = trajectory.state(t);
            if cfg.respiration_enabled {
                state.tip.z += respiration_displacement(t, cfg.respiration_rate, cfg.respiration_amplitude);
            }
            let mut pose = pose_for_tip(&truth, &state, t0 + t);
            if cfg.pose_noise_sigma > 0.0 {
                pose.position += Vec3::from_fn(|_, _| noise.sample(&mut rng));
            }
            pose
        })
        .collect()
}

/// Tracker-space points the calibrated tip reports when touching each
/// fiducial, with optional isotropic Gaussian noise (mm per axis).
pub fn fiducial_touch_sequence(cfg: &PhantomConfig, noise_sigma: f64, seed: u64) -> Vec<(String, Vec3<f64>)> {
    let truth = GroundTruth::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    truth
        .fiducials_tracker
        .iter()
        .enumerate()
        .map(|(n, p)| {
            let jitter = if noise_sigma > 0.0 { Vec3::from_fn(|_, _| noise.sample(&mut rng)) } else { Vec3::zeros() };
            (format!("F{}", n + 1), p + jitter)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn respiration_examples() {
        assert_eq!(respiration_displacement(0.0, 12.0, 10.0), 0.0);
        assert_abs_diff_eq!(respiration_displacement(2.5, 12.0, 10.0), 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(respiration_displacement(1.25, 12.0, 10.0), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn default_config_is_valid_and_consistent() {
        let cfg = PhantomConfig::default();
        cfg.validate().unwrap();
        GroundTruth::from_config(&cfg).check_consistency().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = PhantomConfig::default();
        cfg.lesion_center = [500.0, 0.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.fiducials[0] = [0.0, 0.0, 0.0];
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.fiducials.truncate(3);
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.respiration_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rotation_between_handles_opposites() {
        for (a, b) in [
            (Vec3::z(), Vec3::x()),
            (Vec3::z(), -Vec3::z()),
            (Vec3::z(), Vec3::z()),
            (Vec3::new(1.0, 2.0, 3.0).normalize(), Vec3::new(-1.0, 0.5, 0.0).normalize()),
        ] {
            let r = rotation_between(&a, &b);
            assert_abs_diff_eq!(r * a, b, epsilon = 1e-12);
            assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn truth_text_round_trip() {
        let truth = GroundTruth::from_config(&PhantomConfig::default());
        let back = GroundTruth::parse_text(&truth.to_text()).unwrap();
        assert_eq!(back, truth);
        assert!(GroundTruth::parse_text("tip_offset = 1 2").is_err());
    }
}
