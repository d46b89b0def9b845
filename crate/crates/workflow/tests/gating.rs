mod common;

use proptest::prelude::*;

use petnav_workflow::steps::{Op, StepStatus, Workflow, WorkflowStep, GUIDANCE_PREREQUISITES};

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        1 => any::<bool>().prop_map(|ok| Op::LoadVolumes { ok }),
        1 => any::<bool>().prop_map(|ok| Op::Register { ok }),
        1 => Just(Op::ConnectTracking),
        1 => Just(Op::PoseReceived),
        1 => Just(Op::DisconnectTracking),
        1 => any::<bool>().prop_map(|ok| Op::Calibrate { ok }),
        1 => Just(Op::SkipCalibration),
        3 => any::<bool>().prop_map(|solved| Op::AddFiducial { solved }),
        1 => Just(Op::ClearFiducials),
        1 => any::<bool>().prop_map(|ok| Op::SetPlan { ok }),
        2 => Just(Op::StartGuidance),
        1 => Just(Op::StopGuidance),
        1 => Just(Op::Restore),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn random_sequences_respect_gating_and_cascades(ops in prop::collection::vec(op(), 1..80)) {
        let mut w = Workflow::default();
        for (i, op) in ops.iter().enumerate() {
            if let Err(e) = common::step_and_check(&mut w, *op) {
                prop_assert!(false, "op {i} {op:?}: {e}");
            }
        }
    }
}

#[test]
fn reference_graph_matches_declared_dependents() {
    fn closure(step: WorkflowStep) -> Vec<WorkflowStep> {
        let mut out: Vec<WorkflowStep> = Vec::new();
        for &d in step.dependents() {
            for s in std::iter::once(d).chain(closure(d)) {
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out.sort();
        out
    }
    // a new plan replaces the old one in place, so nothing downstream of
    // PATH_PLANNING is invalidated by it; DATA_LOADING already covers GUIDANCE
    for s in WorkflowStep::ALL.into_iter().filter(|s| *s != WorkflowStep::PathPlanning) {
        let mut expected = common::downstream(s);
        expected.sort();
        assert_eq!(closure(s), expected, "dependents of {s}");
    }
    let mut prereq = GUIDANCE_PREREQUISITES.to_vec();
    prereq.sort();
    let mut needs = common::needs(WorkflowStep::Guidance).to_vec();
    needs.sort();
    assert_eq!(prereq, needs);
}

#[test]
fn shortest_path_to_guidance() {
    let mut w = Workflow::default();
    let mut ops = vec![
        Op::LoadVolumes { ok: true },
        Op::Register { ok: true },
        Op::ConnectTracking,
        Op::PoseReceived,
        Op::SkipCalibration,
        Op::SetPlan { ok: true },
    ];
    ops.extend([Op::AddFiducial { solved: true }; 4]);
    for op in ops {
        assert!(w.apply(Op::StartGuidance).is_err());
        common::step_and_check(&mut w, op).unwrap();
    }
    common::step_and_check(&mut w, Op::StartGuidance).unwrap();
    assert_eq!(w.steps.get(WorkflowStep::Guidance), StepStatus::InProgress);
}
