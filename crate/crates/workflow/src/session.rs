//! The persistent session record and its JSON file format.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use petnav_core::intensity::{RegistrationConfig, RegistrationReport};
use petnav_core::landmark::{LandmarkPair, LandmarkRegistration};
use petnav_core::pivot::{PivotResult, DEFAULT_DIVERSITY_THRESHOLD, DEFAULT_MIN_POSES};
use petnav_core::planning::{BiopsyPlan, STALENESS_THRESHOLD};
use petnav_core::volume::{Modality, ScalarType, Volume};

use crate::steps::{StepTable, Workflow, WorkflowStep};

pub const SCHEMA_VERSION: u32 = 1;

/// Settings snapshotted into every session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub registration: RegistrationConfig,
    /// Seconds without a fresh pose before guidance and fiducial capture refuse it.
    pub staleness_threshold: f64,
    pub guidance_rate_hz: f64,
    pub pivot_min_poses: usize,
    pub pivot_diversity_threshold: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            registration: RegistrationConfig::default(),
            staleness_threshold: STALENESS_THRESHOLD,
            guidance_rate_hz: 20.0,
            pivot_min_poses: DEFAULT_MIN_POSES,
            pivot_diversity_threshold: DEFAULT_DIVERSITY_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeInfo {
    pub path: PathBuf,
    pub modality: Modality,
    pub scalar_type: ScalarType,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl VolumeInfo {
    pub fn describe(path: &Path, v: &Volume) -> Self {
        Self {
            path: path.to_path_buf(),
            modality: v.modality(),
            scalar_type: v.scalar_type(),
            dims: v.dims(),
            spacing: v.spacing().into(),
            origin: v.origin().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyVolumes {
    pub comp_ct: VolumeInfo,
    pub comp_pet: VolumeInfo,
    pub interventional: VolumeInfo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegistrationMode {
    Rigid,
    Deformable,
}

/// Interventional CT (fixed) against compensated CT (moving).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub mode: RegistrationMode,
    pub rigid: RegistrationReport,
    pub deformable: Option<RegistrationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Calibration {
    Solved { result: PivotResult<f64> },
    /// Uncalibrated tool: the tip is taken at the sensor origin.
    Skipped,
}

impl Calibration {
    pub fn tip_offset(&self) -> petnav_core::Vector3 {
        match self {
            Calibration::Solved { result } => result.tip_offset,
            Calibration::Skipped => petnav_core::Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackerEndpoint {
    pub host: String,
    pub port: u16,
}

impl TrackerEndpoint {
    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// Seconds since the Unix epoch.
    pub time: f64,
    pub step: Option<WorkflowStep>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSession {
    pub schema_version: u32,
    pub id: String,
    pub config: SessionConfig,
    pub steps: StepTable,
    pub volumes: Option<StudyVolumes>,
    pub registration: Option<RegistrationRecord>,
    pub tracker: Option<TrackerEndpoint>,
    pub calibration: Option<Calibration>,
    pub fiducials: Vec<LandmarkPair<f64>>,
    pub patient_registration: Option<LandmarkRegistration<f64>>,
    pub plan: Option<BiopsyPlan<f64>>,
    pub events: Vec<Event>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("session file is not valid: {0}")]
    Format(#[from] serde_json::Error),
    #[error("session schema version {found} is not supported (expected {SCHEMA_VERSION})")]
    Version { found: u64 },
    #[error("session file is inconsistent: {0}")]
    Inconsistent(String),
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn new_id() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos()).unwrap_or(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    format!("{:x}-{:x}-{n:x}", nanos, std::process::id())
}

impl WorkflowSession {
    pub fn create(config: SessionConfig) -> Self {
        let mut s = Self {
            schema_version: SCHEMA_VERSION,
            id: new_id(),
            config,
            steps: StepTable::default(),
            volumes: None,
            registration: None,
            tracker: None,
            calibration: None,
            fiducials: Vec::new(),
            patient_registration: None,
            plan: None,
            events: Vec::new(),
        };
        s.log(None, "session created");
        s
    }

    pub fn log(&mut self, step: Option<WorkflowStep>, message: impl Into<String>) {
        let seq = self.events.last().map_or(0, |e| e.seq + 1);
        // wall clocks can step backwards; the log stays ordered regardless
        let time = self.events.last().map_or(unix_now(), |e| unix_now().max(e.time));
        self.events.push(Event { seq, time, step, message: message.into() });
    }

    pub fn workflow(&self) -> Workflow {
        Workflow::new(self.steps, self.fiducials.len())
    }

    /// Drops the artifacts of steps the state machine has reset.
    pub fn clear_artifacts(&mut self, reset: &[WorkflowStep]) {
        for step in reset {
            match step {
                WorkflowStep::Registration => self.registration = None,
                WorkflowStep::PatientRegistration => {
                    self.fiducials.clear();
                    self.patient_registration = None;
                }
                WorkflowStep::PathPlanning => self.plan = None,
                _ => {}
            }
        }
    }

    /// Canonical file text. Live tracking is not persisted, so TRACKING and
    /// anything depending on it are written as pending.
    pub fn to_json(&self) -> String {
        let mut doc = self.clone();
        let mut w = doc.workflow();
        if w.apply(crate::steps::Op::Restore).is_ok() {
            doc.steps = w.steps;
        }
        let mut text = serde_json::to_string_pretty(&doc).expect("session serializes");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self, SessionError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let found = raw.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if found != u64::from(SCHEMA_VERSION) {
            return Err(SessionError::Version { found });
        }
        let mut s: Self = serde_json::from_value(raw)?;
        let mut w = s.workflow();
        w.apply(crate::steps::Op::Restore).map_err(|e| SessionError::Inconsistent(e.to_string()))?;
        w.check_invariants().map_err(SessionError::Inconsistent)?;
        s.steps = w.steps;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SessionError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_distinct() {
        let a = WorkflowSession::create(SessionConfig::default());
        let b = WorkflowSession::create(SessionConfig::default());
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn log_is_ordered() {
        let mut s = WorkflowSession::create(SessionConfig::default());
        for i in 0..5 {
            s.log(None, format!("e{i}"));
        }
        assert!(s.events.windows(2).all(|w| w[1].seq == w[0].seq + 1 && w[1].time >= w[0].time));
    }

    #[test]
    fn future_schema_rejected() {
        let s = WorkflowSession::create(SessionConfig::default());
        let text = s.to_json().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(matches!(WorkflowSession::from_json(&text), Err(SessionError::Version { found: 2 })));
    }
}
