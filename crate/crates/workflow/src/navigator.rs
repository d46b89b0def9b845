//! Live navigation session: the persistent [`WorkflowSession`] plus loaded
//! volumes, the tracker connection and the latest-pose slot.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use petnav_core::intensity::{register_bspline_mi, register_rigid_mi, RegistrationConfig, RegistrationError};
use petnav_core::landmark::{register_landmarks, LandmarkPair};
use petnav_core::nrrd::load_volume;
use petnav_core::pivot::{pivot_calibrate, PivotBuffer, PoseSample};
use petnav_core::planning::{compute_guidance, make_plan, GuidanceState};
use petnav_core::transforms::{Deformable, Rigid};
use petnav_core::volume::{Modality, Volume};
use petnav_core::{Mat3, Vec3};
use petnav_igtl::{connect_tracker_client, ClientStatus, Matrix34, Message, TrackerClient};

use crate::session::{
    Calibration, RegistrationMode, RegistrationRecord, SessionConfig, SessionError, StudyVolumes, TrackerEndpoint,
    VolumeInfo, WorkflowSession,
};
use crate::steps::{GatingError, Op, WorkflowStep};

/// Guidance records kept for late subscribers.
const LIVE_HISTORY: usize = 200;

#[derive(Debug, Error)]
pub enum NavError {
    #[error(transparent)]
    Gating(#[from] GatingError),
    #[error("{0}")]
    Invalid(String),
    #[error("latest pose is {age:.3} s old (limit {limit} s); hold the tool still and retry")]
    StalePose { age: f64, limit: f64 },
    #[error("no pose received yet")]
    NoPose,
    #[error("could not load volume: {0}")]
    Volume(String),
    #[error("registration failed: {0}")]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("tracker connection: {0}")]
    Tracker(String),
}

/// Pose as last received, stamped with the local receive time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatestPose {
    /// Rotation and position as sent; `timestamp` is the receive time on the session clock.
    pub pose: PoseSample<f64>,
    pub sender_time: f64,
    pub seq: u64,
}

/// Single-writer slot for the freshest tracker pose, plus an optional
/// capture buffer used while the tool is being pivoted.
#[derive(Debug)]
pub struct PoseSlot {
    epoch: Instant,
    latest: Mutex<Option<LatestPose>>,
    capture: Mutex<Option<Vec<PoseSample<f64>>>>,
}

impl Default for PoseSlot {
    fn default() -> Self {
        Self { epoch: Instant::now(), latest: Mutex::new(None), capture: Mutex::new(None) }
    }
}

impl PoseSlot {
    /// Seconds on the session clock.
    pub fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64()
    }

    pub fn publish(&self, pose: PoseSample<f64>) {
        let received = self.now();
        let mut latest = self.latest.lock().unwrap();
        let seq = latest.map_or(0, |l| l.seq + 1);
        *latest = Some(LatestPose { pose: PoseSample { timestamp: received, ..pose }, sender_time: pose.timestamp, seq });
        drop(latest);
        if let Some(buf) = self.capture.lock().unwrap().as_mut() {
            buf.push(pose);
        }
    }

    pub fn latest(&self) -> Option<LatestPose> {
        *self.latest.lock().unwrap()
    }

    fn reset(&self) {
        *self.latest.lock().unwrap() = None;
    }

    fn set_capture(&self, active: bool) -> Vec<PoseSample<f64>> {
        let mut c = self.capture.lock().unwrap();
        let taken = c.take().unwrap_or_default();
        if active {
            *c = Some(Vec::new());
        }
        taken
    }

    pub fn capturing(&self) -> bool {
        self.capture.lock().unwrap().is_some()
    }
}

/// Tracker TRANSFORM matrix as a pose sample.
pub fn pose_from_matrix(m: &Matrix34, timestamp: f64) -> PoseSample<f64> {
    let rotation = Mat3::from_fn(|r, c| f64::from(m[r][c]));
    let position = Vec3::new(f64::from(m[0][3]), f64::from(m[1][3]), f64::from(m[2][3]));
    PoseSample::new(rotation, position, timestamp)
}

pub fn matrix_from_pose(p: &PoseSample<f64>) -> Matrix34 {
    let mut m = [[0f32; 4]; 3];
    for (r, row) in m.iter_mut().enumerate() {
        for c in 0..3 {
            row[c] = p.rotation[(r, c)] as f32;
        }
        row[3] = p.position[r] as f32;
    }
    m
}

#[derive(Debug, Clone)]
pub struct LoadedVolumes {
    pub comp_ct: Arc<Volume>,
    pub comp_pet: Arc<Volume>,
    pub interventional: Arc<Volume>,
}

/// Registration inputs detached from the session so the optimizer can run
/// without holding it.
#[derive(Debug, Clone)]
pub struct RegistrationJob {
    mode: RegistrationMode,
    fixed: Arc<Volume>,
    moving: Arc<Volume>,
    config: RegistrationConfig,
    generation: u64,
}

impl RegistrationJob {
    pub fn run(&self) -> Result<RegistrationRecord, RegistrationError> {
        let rigid = register_rigid_mi(&self.fixed, &self.moving, &Rigid::identity(), &self.config)?;
        let deformable = match self.mode {
            RegistrationMode::Rigid => None,
            RegistrationMode::Deformable => {
                Some(register_bspline_mi(&self.fixed, &self.moving, &rigid.final_transform, &self.config)?)
            }
        };
        Ok(RegistrationRecord { mode: self.mode, rigid, deformable })
    }
}

impl RegistrationRecord {
    /// Neither stage made the metric worse than where it started.
    pub fn acceptable(&self) -> bool {
        let ok = |r: &petnav_core::RegistrationReport| r.final_mi.is_finite() && r.final_mi >= r.initial_mi;
        ok(&self.rigid) && self.deformable.as_ref().is_none_or(ok)
    }

    /// Interventional-CT world → compensated-CT world.
    pub fn map_to_comp(&self, p: &Vec3<f64>) -> Vec3<f64> {
        let q = self.rigid.final_transform.apply(p);
        match self.deformable.as_ref().and_then(|d| d.grid.as_ref()) {
            Some(g) => q + g.support(&q).map(|s| g.displacement_at(&s)).unwrap_or_else(Vec3::zeros),
            None => q,
        }
    }

    /// Compensated-CT world → interventional-CT world; the deformable part is
    /// inverted by fixed-point iteration.
    pub fn map_to_interventional(&self, p: &Vec3<f64>) -> Vec3<f64> {
        let inv = self.rigid.final_transform.inverse();
        let mut x = inv.apply(p);
        if self.deformable.is_some() {
            for _ in 0..50 {
                let r = p - self.map_to_comp(&x);
                x += inv.apply_vector(&r);
                if r.norm() < 1e-9 {
                    break;
                }
            }
        }
        x
    }

    pub fn as_deformable(&self) -> Option<Deformable<f64>> {
        let grid = self.deformable.as_ref()?.grid.clone()?;
        Some(Deformable { rigid: self.rigid.final_transform, grid })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerLink {
    pub connected: bool,
    pub connections: u64,
    pub received: u64,
    pub last_error: Option<String>,
}

impl From<ClientStatus> for TrackerLink {
    fn from(s: ClientStatus) -> Self {
        Self { connected: s.connected, connections: s.connections, received: s.received, last_error: s.last_error }
    }
}

/// Live state reported beside the session document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveStatus {
    pub tracker: Option<TrackerLink>,
    pub pose_age: Option<f64>,
    pub poses_received: u64,
    pub calibration_poses: usize,
    pub capturing: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub session: WorkflowSession,
    pub live: LiveStatus,
}

pub struct Navigator {
    session: WorkflowSession,
    volumes: Option<LoadedVolumes>,
    generation: u64,
    slot: Arc<PoseSlot>,
    client: Option<TrackerClient>,
    calibration_poses: Vec<PoseSample<f64>>,
    live: VecDeque<GuidanceState<f64>>,
}

impl Navigator {
    pub fn new(config: SessionConfig) -> Self {
        Self::from_session(WorkflowSession::create(config))
    }

    /// Wraps a restored session, reloading its volumes when they were loaded.
    pub fn from_session(session: WorkflowSession) -> Self {
        let mut nav = Self {
            session,
            volumes: None,
            generation: 0,
            slot: Arc::new(PoseSlot::default()),
            client: None,
            calibration_poses: Vec::new(),
            live: VecDeque::new(),
        };
        if nav.session.steps.is_complete(WorkflowStep::DataLoading) {
            match &nav.session.volumes {
                Some(v) => match load_study(v) {
                    Ok(l) => nav.volumes = Some(l),
                    Err(e) => {
                        let _ = nav.transition(Op::LoadVolumes { ok: false });
                        nav.session.volumes = None;
                        nav.session.log(Some(WorkflowStep::DataLoading), format!("volumes unavailable after restore: {e}"));
                    }
                },
                None => {
                    let _ = nav.transition(Op::LoadVolumes { ok: false });
                }
            }
        }
        nav
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NavError> {
        Ok(Self::from_session(WorkflowSession::load(path)?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NavError> {
        self.session.save(path)?;
        Ok(())
    }

    pub fn session(&self) -> &WorkflowSession {
        &self.session
    }

    pub fn config(&self) -> &SessionConfig {
        &self.session.config
    }

    pub fn volumes(&self) -> Option<&LoadedVolumes> {
        self.volumes.as_ref()
    }

    pub fn slot(&self) -> Arc<PoseSlot> {
        Arc::clone(&self.slot)
    }

    pub fn now(&self) -> f64 {
        self.slot.now()
    }

    pub fn recent_guidance(&self) -> impl Iterator<Item = &GuidanceState<f64>> {
        self.live.iter()
    }

    /// Runs `op` through the state machine, dropping artifacts of reset steps.
    fn transition(&mut self, op: Op) -> Result<(), GatingError> {
        let mut w = self.session.workflow();
        let reset = w.apply(op)?;
        self.session.steps = w.steps;
        self.session.clear_artifacts(&reset);
        if !reset.is_empty() {
            let names: Vec<_> = reset.iter().map(|s| s.as_str()).collect();
            self.session.log(None, format!("reset {}", names.join(", ")));
        }
        Ok(())
    }

    /// Rejects `op` now if the state machine would, without changing anything.
    fn gate(&self, op: Op) -> Result<(), GatingError> {
        self.session.workflow().apply(op).map(|_| ())
    }

    /// Marks tracking complete once the first pose has arrived.
    pub fn sync(&mut self) {
        if self.session.steps.get(WorkflowStep::Tracking) == crate::steps::StepStatus::InProgress
            && self.slot.latest().is_some()
        {
            let _ = self.transition(Op::PoseReceived);
            self.session.log(Some(WorkflowStep::Tracking), "first pose received");
        }
    }

    pub fn snapshot(&mut self) -> Snapshot {
        self.sync();
        let latest = self.slot.latest();
        Snapshot {
            session: self.session.clone(),
            live: LiveStatus {
                tracker: self.client.as_ref().map(|c| c.status().into()),
                pose_age: latest.map(|l| self.slot.now() - l.pose.timestamp),
                poses_received: latest.map_or(0, |l| l.seq + 1),
                calibration_poses: self.calibration_poses.len(),
                capturing: self.slot.capturing(),
            },
        }
    }

    pub fn set_volumes(&mut self, comp_ct: &Path, comp_pet: &Path, interventional: &Path) -> Result<(), NavError> {
        let step = Some(WorkflowStep::DataLoading);
        let loaded = (|| -> Result<(LoadedVolumes, StudyVolumes), NavError> {
            let load = |p: &Path, m: Modality| {
                load_volume(p).map(|v| v.with_modality(m)).map_err(|e| NavError::Volume(format!("{}: {e}", p.display())))
            };
            let ct = load(comp_ct, Modality::Ct)?;
            let pet = load(comp_pet, Modality::Pet)?;
            let ict = load(interventional, Modality::InterventionalCt)?;
            let info = StudyVolumes {
                comp_ct: VolumeInfo::describe(comp_ct, &ct),
                comp_pet: VolumeInfo::describe(comp_pet, &pet),
                interventional: VolumeInfo::describe(interventional, &ict),
            };
            let vols =
                LoadedVolumes { comp_ct: Arc::new(ct), comp_pet: Arc::new(pet), interventional: Arc::new(ict) };
            Ok((vols, info))
        })();
        self.generation += 1;
        match loaded {
            Ok((vols, info)) => {
                self.volumes = Some(vols);
                self.session.volumes = Some(info);
                self.transition(Op::LoadVolumes { ok: true })?;
                self.session.log(step, "volumes loaded");
                Ok(())
            }
            Err(e) => {
                self.volumes = None;
                self.session.volumes = None;
                self.transition(Op::LoadVolumes { ok: false })?;
                self.session.log(step, format!("volume loading failed: {e}"));
                Err(e)
            }
        }
    }

    pub fn prepare_registration(&self, mode: RegistrationMode) -> Result<RegistrationJob, NavError> {
        self.gate(Op::Register { ok: true })?;
        let v = self.volumes.as_ref().ok_or_else(|| NavError::Invalid("volumes are not loaded".into()))?;
        Ok(RegistrationJob {
            mode,
            fixed: Arc::clone(&v.interventional),
            moving: Arc::clone(&v.comp_ct),
            config: self.session.config.registration.clone(),
            generation: self.generation,
        })
    }

    pub fn commit_registration(
        &mut self,
        job: &RegistrationJob,
        result: Result<RegistrationRecord, RegistrationError>,
    ) -> Result<(), NavError> {
        if job.generation != self.generation {
            return Err(NavError::Invalid("volumes changed while registration was running".into()));
        }
        let step = Some(WorkflowStep::Registration);
        match result {
            Ok(rec) if rec.acceptable() => {
                let last = rec.deformable.as_ref().unwrap_or(&rec.rigid);
                let msg = format!("{:?} registration: MI {:.4} -> {:.4} bits", rec.mode, rec.rigid.initial_mi, last.final_mi);
                let replaced = self.session.registration.is_some();
                self.transition(Op::Register { ok: true })?;
                self.session.registration = Some(rec);
                self.session.log(step, if replaced { format!("re-registration, {msg}") } else { msg });
                Ok(())
            }
            Ok(rec) => {
                self.transition(Op::Register { ok: false })?;
                let msg = format!("registration lowered MI ({:.4} -> {:.4})", rec.rigid.initial_mi, rec.rigid.final_mi);
                self.session.log(step, msg.clone());
                Err(NavError::Invalid(msg))
            }
            Err(e) => {
                self.transition(Op::Register { ok: false })?;
                self.session.log(step, format!("registration failed: {e}"));
                Err(e.into())
            }
        }
    }

    pub fn run_registration(&mut self, mode: RegistrationMode) -> Result<(), NavError> {
        let job = self.prepare_registration(mode)?;
        let result = job.run();
        self.commit_registration(&job, result)
    }

    /// Connects to a tracker server; TRACKING completes when the first pose arrives.
    pub fn connect_tracking(&mut self, host: &str, port: u16) -> Result<(), NavError> {
        self.drop_client();
        let slot = Arc::clone(&self.slot);
        let endpoint = TrackerEndpoint { host: host.to_string(), port };
        let client = connect_tracker_client(&endpoint.address(), move |m| {
            if let Message::Transform(t) = m {
                slot.publish(pose_from_matrix(&t.matrix, t.timestamp.as_secs_f64()));
            }
        })
        .map_err(|e| NavError::Tracker(e.to_string()))?;
        self.client = Some(client);
        self.transition(Op::ConnectTracking)?;
        self.session.log(Some(WorkflowStep::Tracking), format!("connecting to {}", endpoint.address()));
        self.session.tracker = Some(endpoint);
        Ok(())
    }

    /// Tracking fed in-process through [`Navigator::inject_pose`] instead of TCP.
    pub fn connect_local(&mut self) -> Result<(), NavError> {
        self.drop_client();
        self.transition(Op::ConnectTracking)?;
        self.session.tracker = Some(TrackerEndpoint { host: "in-process".into(), port: 0 });
        self.session.log(Some(WorkflowStep::Tracking), "in-process pose source attached");
        Ok(())
    }

    pub fn inject_pose(&self, pose: PoseSample<f64>) {
        self.slot.publish(pose);
    }

    pub fn disconnect_tracking(&mut self) -> Result<(), NavError> {
        self.drop_client();
        self.transition(Op::DisconnectTracking)?;
        self.session.tracker = None;
        self.session.log(Some(WorkflowStep::Tracking), "tracker disconnected");
        Ok(())
    }

    fn drop_client(&mut self) {
        if let Some(c) = self.client.take() {
            c.stop();
        }
        self.slot.reset();
    }

    pub fn tracker_status(&self) -> Option<ClientStatus> {
        self.client.as_ref().map(|c| c.status())
    }

    pub fn add_calibration_poses(&mut self, poses: Vec<PoseSample<f64>>) -> Result<usize, NavError> {
        for (i, p) in poses.iter().enumerate() {
            p.validate().map_err(|e| NavError::Invalid(format!("pose {i}: {e}")))?;
        }
        self.calibration_poses.extend(poses);
        Ok(self.calibration_poses.len())
    }

    /// Starts or stops collecting streamed poses for calibration; returns the buffer size.
    pub fn set_capture(&mut self, active: bool) -> usize {
        let captured = self.slot.set_capture(active);
        self.calibration_poses.extend(captured);
        self.calibration_poses.len()
    }

    pub fn run_calibration(&mut self) -> Result<(), NavError> {
        self.set_capture(false);
        let cfg = &self.session.config;
        let mut buffer = PivotBuffer::new(cfg.pivot_min_poses, cfg.pivot_diversity_threshold);
        for p in &self.calibration_poses {
            buffer.accumulate(*p).map_err(|e| NavError::Invalid(e.to_string()))?;
        }
        let step = Some(WorkflowStep::ToolCalibration);
        match pivot_calibrate(&buffer) {
            Ok(result) => {
                self.transition(Op::Calibrate { ok: true })?;
                self.session.log(
                    step,
                    format!("pivot calibration from {} poses, rms {:.4} mm", result.n_poses, result.rms_residual),
                );
                self.session.calibration = Some(Calibration::Solved { result });
                self.calibration_poses.clear();
                Ok(())
            }
            Err(e) => {
                self.transition(Op::Calibrate { ok: false })?;
                self.session.calibration = None;
                self.session.log(step, format!("pivot calibration failed: {e}"));
                Err(NavError::Invalid(e.to_string()))
            }
        }
    }

    pub fn skip_calibration(&mut self) -> Result<(), NavError> {
        self.transition(Op::SkipCalibration)?;
        self.session.calibration = Some(Calibration::Skipped);
        self.session.log(Some(WorkflowStep::ToolCalibration), "calibration skipped; tip offset (0, 0, 0)");
        Ok(())
    }

    fn tip_offset(&self) -> Vec3<f64> {
        self.session.calibration.as_ref().map_or_else(Vec3::zeros, Calibration::tip_offset)
    }

    /// Pose no older than the staleness limit at `now`.
    fn fresh_pose(&self, now: f64) -> Result<PoseSample<f64>, NavError> {
        let latest = self.slot.latest().ok_or(NavError::NoPose)?;
        let age = now - latest.pose.timestamp;
        let limit = self.session.config.staleness_threshold;
        if age > limit {
            return Err(NavError::StalePose { age, limit });
        }
        Ok(latest.pose)
    }

    /// Pairs the current calibrated tip position with `image_point`.
    pub fn record_fiducial(&mut self, image_point: Vec3<f64>, label: Option<String>, now: f64) -> Result<(), NavError> {
        self.sync();
        if !image_point.iter().all(|v| v.is_finite()) {
            return Err(NavError::Invalid("image point must be finite".into()));
        }
        self.gate(Op::AddFiducial { solved: true })?;
        let pose = self.fresh_pose(now)?;
        let tracker_point = pose.apply(&self.tip_offset());
        let label = label.unwrap_or_else(|| format!("F{}", self.session.fiducials.len() + 1));
        let mut pairs = self.session.fiducials.clone();
        pairs.push(LandmarkPair::new(label.clone(), image_point, tracker_point));

        let step = Some(WorkflowStep::PatientRegistration);
        let solved = if pairs.len() >= crate::steps::MIN_FIDUCIAL_PAIRS {
            match register_landmarks(&pairs) {
                Ok(r) => Some(r),
                Err(e) => {
                    self.session.log(step, format!("landmark registration failed: {e}"));
                    None
                }
            }
        } else {
            None
        };
        self.transition(Op::AddFiducial { solved: solved.is_some() })?;
        self.session.fiducials = pairs;
        self.session.log(step, format!("fiducial {label} recorded"));
        if let Some(r) = &solved {
            self.session.log(step, format!("patient registration rmse {:.6} mm", r.rmse));
        }
        self.session.patient_registration = solved;
        Ok(())
    }

    pub fn clear_fiducials(&mut self) -> Result<(), NavError> {
        self.transition(Op::ClearFiducials)?;
        self.session.fiducials.clear();
        self.session.patient_registration = None;
        self.session.log(Some(WorkflowStep::PatientRegistration), "fiducials cleared");
        Ok(())
    }

    pub fn set_plan(&mut self, entry: Vec3<f64>, target: Vec3<f64>) -> Result<(), NavError> {
        self.gate(Op::SetPlan { ok: true })?;
        let plan = make_plan(entry, target).map_err(|e| NavError::Invalid(e.to_string()))?;
        self.transition(Op::SetPlan { ok: true })?;
        let verb = if self.session.plan.is_some() { "plan replaced" } else { "plan set" };
        self.session.log(Some(WorkflowStep::PathPlanning), format!("{verb}, length {:.2} mm", plan.length));
        self.session.plan = Some(plan);
        Ok(())
    }

    /// One guidance update at `now` (session clock). Starts guidance on first use.
    pub fn guidance_tick(&mut self, now: f64) -> Result<GuidanceState<f64>, NavError> {
        self.sync();
        if self.session.steps.get(WorkflowStep::Guidance) != crate::steps::StepStatus::InProgress {
            self.transition(Op::StartGuidance)?;
            self.session.log(Some(WorkflowStep::Guidance), "guidance started");
        }
        let latest = self.slot.latest().ok_or(NavError::NoPose)?;
        let (Some(plan), Some(reg)) = (&self.session.plan, &self.session.patient_registration) else {
            return Err(NavError::Invalid("session lost its plan or patient registration".into()));
        };
        let mut g = compute_guidance(plan, &latest.pose, &self.tip_offset(), &reg.transform, now);
        g.valid = g.pose_age <= self.session.config.staleness_threshold;
        if self.live.len() == LIVE_HISTORY {
            self.live.pop_front();
        }
        self.live.push_back(g.clone());
        Ok(g)
    }

    pub fn stop_guidance(&mut self) -> Result<(), NavError> {
        self.transition(Op::StopGuidance)?;
        self.session.log(Some(WorkflowStep::Guidance), "guidance stopped");
        Ok(())
    }
}

fn load_study(v: &StudyVolumes) -> Result<LoadedVolumes, NavError> {
    let load = |i: &VolumeInfo| -> Result<Arc<Volume>, NavError> {
        let vol = load_volume(&i.path).map_err(|e| NavError::Volume(format!("{}: {e}", i.path.display())))?;
        Ok(Arc::new(vol.with_modality(i.modality)))
    };
    Ok(LoadedVolumes { comp_ct: load(&v.comp_ct)?, comp_pet: load(&v.comp_pet)?, interventional: load(&v.interventional)? })
}

/// The three study files inside a phantom output directory.
pub fn phantom_paths(dir: &Path) -> [PathBuf; 3] {
    [dir.join("comp_ct.nrrd"), dir.join("comp_pet.nrrd"), dir.join("interventional_ct.nrrd")]
}
