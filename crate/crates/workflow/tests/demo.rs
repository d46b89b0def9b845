use petnav_core::phantom::PhantomConfig;
use petnav_workflow::demo::{hot_spot_centroid, run_demo, DemoConfig, Transport};
use petnav_workflow::steps::{StepStatus, WorkflowStep};
use petnav_workflow::WorkflowSession;

fn demo(transport: Transport, sigma: f64, seed: u64) -> (tempfile::TempDir, petnav_workflow::demo::DemoReport) {
    let dir = tempfile::tempdir().unwrap();
    let phantom = PhantomConfig { pose_noise_sigma: sigma, seed, ..PhantomConfig::default() };
    let mut cfg = DemoConfig::new(phantom, dir.path());
    cfg.transport = transport;
    cfg.check_staleness = true;
    let report = run_demo(&cfg).unwrap();
    (dir, report)
}

#[test]
fn noise_free_direct_run_reaches_the_lesion() {
    let (dir, r) = demo(Transport::Direct, 0.0, 42);
    assert!(r.registration_error_voxels <= 0.5, "{}", r.registration_error_voxels);
    assert!(r.pivot_error <= 1e-6, "{}", r.pivot_error);
    assert!(r.fiducial_rmse <= 1e-6, "{}", r.fiducial_rmse);
    assert!(r.tre <= 1.0, "{}", r.tre);
    assert!(r.depth_monotone, "{:?}", r.depth_trace);
    assert!(r.depth_trace.len() >= 25, "a 60 mm path in 2 mm steps");
    assert_eq!(r.stale_flagged, Some(true));

    let s = WorkflowSession::load(dir.path().join("session.json")).unwrap();
    assert_eq!(s.steps.get(WorkflowStep::PatientRegistration), StepStatus::Complete);
    assert_eq!(s.plan.as_ref(), Some(&r.plan));
    assert!(dir.path().join("truth.txt").exists());
}

#[test]
fn tcp_run_completes_within_wire_precision() {
    let (_dir, r) = demo(Transport::Tcp, 0.0, 42);
    // TRANSFORM bodies carry f32, so calibration and fiducials sit near 1e-5 mm
    assert!(r.pivot_error <= 1e-3, "{}", r.pivot_error);
    assert!(r.fiducial_rmse <= 1e-3, "{}", r.fiducial_rmse);
    assert!(r.tre <= 1.0, "{}", r.tre);
    assert!(r.depth_monotone);
    assert_eq!(r.stale_flagged, Some(true));
}

#[test]
fn noisy_run_stays_near_target() {
    let (_dir, r) = demo(Transport::Direct, 0.5, 7);
    assert!(r.tre <= 3.0, "{}", r.tre);
    assert!(r.pivot_error > 0.0);
}

#[test]
fn hot_spot_lies_inside_the_lesion() {
    let cfg = PhantomConfig::default();
    let ph = petnav_core::phantom::generate_phantom(&cfg).unwrap();
    let c = hot_spot_centroid(&ph.comp_pet);
    assert!((c - ph.truth.lesion_comp).norm() < 0.25 * cfg.lesion_radius, "{c:?}");
}
