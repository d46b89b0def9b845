#![allow(dead_code)]

use std::path::PathBuf;

use rand::Rng;

use petnav_core::phantom::{pose_for_tip, stream_needle_poses, GroundTruth, PhantomConfig, TrajectoryState};
use petnav_core::pivot::PoseSample;
use petnav_core::Vec3;
use petnav_workflow::demo::{builtin_trajectory, write_phantom};
use petnav_workflow::navigator::phantom_paths;
use petnav_workflow::session::RegistrationMode;
use petnav_workflow::steps::{Op, StepStatus, Workflow, WorkflowStep};
use petnav_workflow::{Navigator, SessionConfig};

pub struct Phantom {
    pub dir: tempfile::TempDir,
    pub cfg: PhantomConfig,
    pub truth: GroundTruth,
}

impl Phantom {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig::default();
        let truth = write_phantom(&cfg, dir.path()).unwrap();
        Self { dir, cfg, truth }
    }

    pub fn paths(&self) -> [PathBuf; 3] {
        phantom_paths(self.dir.path())
    }

    /// Noise-free sensor pose putting the tip at `tip` (image frame).
    pub fn pose(&self, tip: Vec3<f64>, direction: Vec3<f64>) -> PoseSample<f64> {
        pose_for_tip(&self.truth, &TrajectoryState { tip, direction: direction.normalize(), roll: 0.0 }, 0.0)
    }

    pub fn with_volumes(&self) -> Navigator {
        let mut nav = Navigator::new(SessionConfig::default());
        let [ct, pet, ict] = self.paths();
        nav.set_volumes(&ct, &pet, &ict).unwrap();
        nav
    }

    /// Registered, tracking in process, calibrated from the pivot stream and
    /// patient-registered on the four phantom fiducials. No plan yet.
    pub fn registered(&self) -> Navigator {
        let mut nav = self.with_volumes();
        nav.run_registration(RegistrationMode::Rigid).unwrap();
        nav.connect_local().unwrap();
        nav.set_capture(true);
        let pivot = builtin_trajectory("pivot", &self.cfg).unwrap();
        for p in stream_needle_poses(&self.cfg, &pivot, 0.0) {
            nav.inject_pose(p);
        }
        nav.run_calibration().unwrap();
        self.touch_fiducials(&mut nav);
        nav
    }

    pub fn touch_fiducials(&self, nav: &mut Navigator) {
        for f in &self.truth.fiducials_image {
            nav.inject_pose(self.pose(*f, -Vec3::z()));
            let now = nav.now();
            nav.record_fiducial(*f, None, now).unwrap();
        }
    }

    /// Entry 60 mm above the lesion along +z, target at the lesion.
    pub fn plan_points(&self) -> (Vec3<f64>, Vec3<f64>) {
        let target = self.truth.lesion_image;
        (target + Vec3::new(0.0, 0.0, 60.0), target)
    }

    pub fn ready(&self) -> Navigator {
        let mut nav = self.registered();
        let (entry, target) = self.plan_points();
        nav.set_plan(entry, target).unwrap();
        nav
    }
}

// Reference dependency graph for the gating checks, written as "needs"
// edges and closed transitively here rather than taken from the crate.
const NEEDS: [(WorkflowStep, &[WorkflowStep]); 7] = {
    use WorkflowStep::*;
    [
        (DataLoading, &[]),
        (Registration, &[DataLoading]),
        (Tracking, &[]),
        (ToolCalibration, &[]),
        (PatientRegistration, &[ToolCalibration]),
        (PathPlanning, &[DataLoading]),
        (Guidance, &[Registration, Tracking, PatientRegistration, PathPlanning]),
    ]
};

pub fn needs(step: WorkflowStep) -> &'static [WorkflowStep] {
    NEEDS.iter().find(|(s, _)| *s == step).unwrap().1
}

/// Every step that directly or indirectly needs `step`.
pub fn downstream(step: WorkflowStep) -> Vec<WorkflowStep> {
    let mut out = Vec::new();
    let mut frontier = vec![step];
    while let Some(s) = frontier.pop() {
        for (d, needs) in NEEDS {
            if needs.contains(&s) && !out.contains(&d) {
                out.push(d);
                frontier.push(d);
            }
        }
    }
    out
}

pub fn random_op(rng: &mut impl Rng) -> Op {
    match rng.random_range(0..13) {
        0 => Op::LoadVolumes { ok: rng.random_bool(0.8) },
        1 => Op::Register { ok: rng.random_bool(0.8) },
        2 => Op::ConnectTracking,
        3 => Op::PoseReceived,
        4 => Op::DisconnectTracking,
        5 => Op::Calibrate { ok: rng.random_bool(0.8) },
        6 => Op::SkipCalibration,
        7 => Op::AddFiducial { solved: rng.random_bool(0.9) },
        8 => Op::ClearFiducials,
        9 => Op::SetPlan { ok: rng.random_bool(0.9) },
        10 => Op::StartGuidance,
        11 => Op::StopGuidance,
        _ => Op::Restore,
    }
}

/// Step whose prior result an op invalidates, given the state after it.
fn invalidated(op: Op, after: &Workflow) -> Option<WorkflowStep> {
    use WorkflowStep::*;
    match op {
        Op::LoadVolumes { .. } => Some(DataLoading),
        Op::Register { .. } => Some(Registration),
        Op::ConnectTracking | Op::DisconnectTracking | Op::Restore => Some(Tracking),
        Op::Calibrate { .. } | Op::SkipCalibration => Some(ToolCalibration),
        Op::ClearFiducials => Some(PatientRegistration),
        Op::AddFiducial { .. } if after.steps.get(PatientRegistration) != StepStatus::Complete => {
            Some(PatientRegistration)
        }
        _ => None,
    }
}

/// The step an op acts on directly.
fn own_step(op: Op) -> Option<WorkflowStep> {
    use WorkflowStep::*;
    match op {
        Op::LoadVolumes { .. } => Some(DataLoading),
        Op::Register { .. } => Some(Registration),
        Op::ConnectTracking | Op::PoseReceived | Op::DisconnectTracking | Op::Restore => Some(Tracking),
        Op::Calibrate { .. } | Op::SkipCalibration => Some(ToolCalibration),
        Op::AddFiducial { .. } | Op::ClearFiducials => Some(PatientRegistration),
        Op::SetPlan { .. } => Some(PathPlanning),
        Op::StartGuidance | Op::StopGuidance => Some(Guidance),
    }
}

/// Applies `op` to `w` and checks it against the reference graph.
pub fn step_and_check(w: &mut Workflow, op: Op) -> Result<(), String> {
    let before = *w;
    match w.apply(op) {
        Err(_) => {
            if *w != before {
                return Err(format!("rejected {op:?} changed the machine"));
            }
        }
        Ok(reset) => {
            if op == Op::StartGuidance {
                if let Some(m) = needs(WorkflowStep::Guidance).iter().find(|&&n| before.steps.get(n) != StepStatus::Complete) {
                    return Err(format!("guidance started while {m} was {:?}", before.steps.get(*m)));
                }
            }
            let down = invalidated(op, w).map(downstream).unwrap_or_default();
            for d in &down {
                if w.steps.get(*d) != StepStatus::Pending {
                    return Err(format!("{op:?} left dependent {d} {:?}", w.steps.get(*d)));
                }
            }
            for s in WorkflowStep::ALL {
                let changed = before.steps.get(s) != w.steps.get(s);
                if changed && Some(s) != own_step(op) && !down.contains(&s) {
                    return Err(format!("{op:?} changed unrelated step {s}"));
                }
                if reset.contains(&s) && !down.contains(&s) {
                    return Err(format!("{op:?} reported reset of {s} outside its dependents"));
                }
            }
            if w.steps.get(WorkflowStep::PatientRegistration) == StepStatus::Pending && w.pairs != 0 {
                return Err("pairs survived a reset".into());
            }
        }
    }
    w.check_invariants()
}
