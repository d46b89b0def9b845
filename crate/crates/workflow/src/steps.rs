//! The seven workflow steps and the rules that move them between states.
//!
//! [`Workflow`] is a pure state machine: the session performs the actual work
//! (loading, registering, solving) and then reports the outcome here, which
//! decides the new step states and which downstream steps must be reset.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fewest fiducial pairs that complete patient registration.
pub const MIN_FIDUCIAL_PAIRS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkflowStep {
    DataLoading,
    Registration,
    Tracking,
    ToolCalibration,
    PatientRegistration,
    PathPlanning,
    Guidance,
}

impl WorkflowStep {
    pub const ALL: [WorkflowStep; 7] = [
        WorkflowStep::DataLoading,
        WorkflowStep::Registration,
        WorkflowStep::Tracking,
        WorkflowStep::ToolCalibration,
        WorkflowStep::PatientRegistration,
        WorkflowStep::PathPlanning,
        WorkflowStep::Guidance,
    ];

    fn ordinal(self) -> usize {
        self as usize
    }

    /// Steps whose results are built on this one and are reset when it changes.
    pub fn dependents(self) -> &'static [WorkflowStep] {
        use WorkflowStep::*;
        match self {
            DataLoading => &[Registration, PathPlanning, Guidance],
            Registration => &[Guidance],
            Tracking => &[Guidance],
            ToolCalibration => &[PatientRegistration, Guidance],
            PatientRegistration => &[Guidance],
            PathPlanning => &[],
            Guidance => &[],
        }
    }

    pub fn as_str(self) -> &'static str {
        use WorkflowStep::*;
        match self {
            DataLoading => "DATA_LOADING",
            Registration => "REGISTRATION",
            Tracking => "TRACKING",
            ToolCalibration => "TOOL_CALIBRATION",
            PatientRegistration => "PATIENT_REGISTRATION",
            PathPlanning => "PATH_PLANNING",
            Guidance => "GUIDANCE",
        }
    }
}

impl fmt::Display for WorkflowStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Steps that must be complete before guidance can run.
pub const GUIDANCE_PREREQUISITES: [WorkflowStep; 4] = [
    WorkflowStep::Registration,
    WorkflowStep::Tracking,
    WorkflowStep::PatientRegistration,
    WorkflowStep::PathPlanning,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepStatus {
    #[default]
    Pending,
    InProgress,
    Complete,
    Skipped,
}

impl StepStatus {
    /// Complete, or deliberately skipped.
    pub fn is_resolved(self) -> bool {
        matches!(self, StepStatus::Complete | StepStatus::Skipped)
    }
}

/// Status of every step; serializes as a map keyed by step name in workflow order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepTable([StepStatus; 7]);

impl StepTable {
    pub fn get(&self, step: WorkflowStep) -> StepStatus {
        self.0[step.ordinal()]
    }

    pub fn set(&mut self, step: WorkflowStep, status: StepStatus) {
        self.0[step.ordinal()] = status;
    }

    pub fn iter(&self) -> impl Iterator<Item = (WorkflowStep, StepStatus)> + '_ {
        WorkflowStep::ALL.iter().map(|&s| (s, self.get(s)))
    }

    pub fn is_complete(&self, step: WorkflowStep) -> bool {
        self.get(step) == StepStatus::Complete
    }
}

impl Serialize for StepTable {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.iter().collect::<BTreeMap<_, _>>().serialize(s)
    }
}

impl<'de> Deserialize<'de> for StepTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<WorkflowStep, StepStatus>::deserialize(d)?;
        let mut t = StepTable::default();
        for (k, v) in map {
            t.set(k, v);
        }
        Ok(t)
    }
}

/// Domain-level events. Flags carry the outcome of work done elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    LoadVolumes { ok: bool },
    Register { ok: bool },
    ConnectTracking,
    PoseReceived,
    DisconnectTracking,
    Calibrate { ok: bool },
    SkipCalibration,
    /// `solved` is whether the landmark solve succeeded once enough pairs exist.
    AddFiducial { solved: bool },
    ClearFiducials,
    SetPlan { ok: bool },
    StartGuidance,
    StopGuidance,
    /// Session restored from disk: live tracking is gone.
    Restore,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatingError {
    #[error("{step} requires {missing} to be complete")]
    Prerequisite { step: WorkflowStep, missing: WorkflowStep },
    #[error("tool calibration must be completed or skipped before recording fiducials")]
    CalibrationUnresolved,
    #[error("rejected: {0}")]
    Rejected(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Workflow {
    pub steps: StepTable,
    pub pairs: usize,
}

impl Workflow {
    pub fn new(steps: StepTable, pairs: usize) -> Self {
        Self { steps, pairs }
    }

    fn require(&self, step: WorkflowStep, needed: &[WorkflowStep]) -> Result<(), GatingError> {
        match needed.iter().find(|&&n| !self.steps.is_complete(n)) {
            Some(&missing) => Err(GatingError::Prerequisite { step, missing }),
            None => Ok(()),
        }
    }

    /// Resets every transitive dependent of `step` to pending; returns those that changed.
    fn cascade(&mut self, step: WorkflowStep, reset: &mut Vec<WorkflowStep>) {
        for &d in step.dependents() {
            if self.steps.get(d) != StepStatus::Pending || (d == WorkflowStep::PatientRegistration && self.pairs > 0) {
                self.steps.set(d, StepStatus::Pending);
                if d == WorkflowStep::PatientRegistration {
                    self.pairs = 0;
                }
                if !reset.contains(&d) {
                    reset.push(d);
                }
            }
            self.cascade(d, reset);
        }
    }

    /// Applies `op`; on success returns the downstream steps that were reset.
    /// A rejected op leaves the machine unchanged.
    pub fn apply(&mut self, op: Op) -> Result<Vec<WorkflowStep>, GatingError> {
        use StepStatus::*;
        use WorkflowStep::*;
        let mut reset = Vec::new();
        match op {
            Op::LoadVolumes { ok } => {
                self.steps.set(DataLoading, if ok { Complete } else { Pending });
                self.cascade(DataLoading, &mut reset);
            }
            Op::Register { ok } => {
                self.require(Registration, &[DataLoading])?;
                self.steps.set(Registration, if ok { Complete } else { InProgress });
                self.cascade(Registration, &mut reset);
            }
            Op::ConnectTracking => {
                self.steps.set(Tracking, InProgress);
                self.cascade(Tracking, &mut reset);
            }
            Op::PoseReceived => {
                if self.steps.get(Tracking) == InProgress {
                    self.steps.set(Tracking, Complete);
                }
            }
            Op::DisconnectTracking => {
                self.steps.set(Tracking, Pending);
                self.cascade(Tracking, &mut reset);
            }
            Op::Calibrate { ok } => {
                self.steps.set(ToolCalibration, if ok { Complete } else { InProgress });
                self.cascade(ToolCalibration, &mut reset);
            }
            Op::SkipCalibration => {
                self.steps.set(ToolCalibration, Skipped);
                self.cascade(ToolCalibration, &mut reset);
            }
            Op::AddFiducial { solved } => {
                self.require(PatientRegistration, &[Tracking])?;
                if !self.steps.get(ToolCalibration).is_resolved() {
                    return Err(GatingError::CalibrationUnresolved);
                }
                self.pairs += 1;
                let done = self.pairs >= MIN_FIDUCIAL_PAIRS && solved;
                self.steps.set(PatientRegistration, if done { Complete } else { InProgress });
                if !done {
                    self.cascade(PatientRegistration, &mut reset);
                }
            }
            Op::ClearFiducials => {
                self.pairs = 0;
                self.steps.set(PatientRegistration, Pending);
                self.cascade(PatientRegistration, &mut reset);
            }
            Op::SetPlan { ok } => {
                self.require(PathPlanning, &[DataLoading])?;
                if !ok {
                    return Err(GatingError::Rejected("degenerate plan"));
                }
                // re-planning during guidance is allowed and does not interrupt it
                self.steps.set(PathPlanning, Complete);
            }
            Op::StartGuidance => {
                self.require(Guidance, &GUIDANCE_PREREQUISITES)?;
                self.steps.set(Guidance, InProgress);
            }
            Op::StopGuidance => {
                if self.steps.get(Guidance) == InProgress {
                    self.steps.set(Guidance, Complete);
                }
            }
            Op::Restore => {
                if self.steps.get(Tracking) != Pending {
                    self.steps.set(Tracking, Pending);
                }
                self.cascade(Tracking, &mut reset);
            }
        }
        Ok(reset)
    }

    /// Structural rules every reachable state satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        use StepStatus::*;
        use WorkflowStep::*;
        let s = &self.steps;
        if matches!(s.get(Guidance), InProgress | Complete) {
            if let Some(m) = GUIDANCE_PREREQUISITES.iter().find(|&&p| !s.is_complete(p)) {
                return Err(format!("GUIDANCE is {:?} while {m} is {:?}", s.get(Guidance), s.get(*m)));
            }
        }
        match s.get(PatientRegistration) {
            Complete if self.pairs < MIN_FIDUCIAL_PAIRS => {
                return Err(format!("PATIENT_REGISTRATION complete with {} pairs", self.pairs));
            }
            Complete | InProgress if !s.get(ToolCalibration).is_resolved() => {
                return Err("PATIENT_REGISTRATION active with unresolved calibration".into());
            }
            Pending if self.pairs > 0 => return Err("pairs held while PATIENT_REGISTRATION pending".into()),
            InProgress if self.pairs == 0 => return Err("PATIENT_REGISTRATION in progress without pairs".into()),
            _ => {}
        }
        for step in [Registration, PathPlanning] {
            if s.get(step) != Pending && !s.is_complete(DataLoading) {
                return Err(format!("{step} is {:?} without DATA_LOADING", s.get(step)));
            }
        }
        if let Some((step, _)) = s.iter().find(|&(st, v)| v == Skipped && st != ToolCalibration) {
            return Err(format!("{step} cannot be skipped"));
        }
        Ok(())
    }
}
