use petnav_core::intensity::{register_rigid_mi, RegistrationConfig};
use petnav_core::landmark::{register_landmarks, LandmarkPair};
use petnav_core::phantom::{
    fiducial_touch_sequence, generate_phantom, respiration_displacement, stream_needle_poses, PhantomConfig, Trajectory,
};
use petnav_core::pivot::solve_pivot;
use petnav_core::planning::tip_in_image;
use petnav_core::scalar::rotation_angle_between;
use petnav_core::transforms::Rigid;
use petnav_core::Vec3;

fn identity_chain() -> PhantomConfig {
    PhantomConfig { tracker_to_image: Rigid::identity(), ..PhantomConfig::default() }
}

#[test]
fn pet_hot_spot_sits_on_the_lesion() {
    let cfg = PhantomConfig::default();
    let ph = generate_phantom(&cfg).unwrap();
    let [i, j, k] = ph.comp_pet.argmax();
    let hot = ph.comp_pet.index_to_world(&Vec3::new(i as f64, j as f64, k as f64));
    let d = (hot - Vec3::from(cfg.lesion_center)).abs();
    let s = ph.comp_pet.spacing();
    assert!(d.x <= s.x && d.y <= s.y && d.z <= s.z, "argmax {hot:?}");
}

#[test]
fn identity_offset_reproduces_comp_ct() {
    let mut cfg = PhantomConfig { interventional_offset: Rigid::identity(), ..PhantomConfig::default() };
    cfg.interventional = cfg.ct;
    // fiducials must stay on the (now unmoved) body surface
    let shifted = PhantomConfig::default();
    let back = shifted.interventional_offset.inverse();
    cfg.fiducials = shifted.fiducials.iter().map(|f| back.apply(&Vec3::from(*f)).into()).collect();
    let ph = generate_phantom(&cfg).unwrap();
    let diff = ph
        .comp_ct
        .data()
        .iter()
        .zip(ph.interventional_ct.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-6, "max difference {diff}");
}

#[test]
fn generation_is_deterministic() {
    let cfg = PhantomConfig::default();
    let a = generate_phantom(&cfg).unwrap();
    let b = generate_phantom(&cfg).unwrap();
    assert_eq!(a.comp_ct, b.comp_ct);
    assert_eq!(a.comp_pet, b.comp_pet);
    assert_eq!(a.interventional_ct, b.interventional_ct);
    let cfg = PhantomConfig { pose_noise_sigma: 0.5, ..PhantomConfig::default() };
    let traj = Trajectory::Static { tip: [0.0, 0.0, 0.0], direction: [0.0, 0.0, 1.0], duration: 2.0 };
    assert_eq!(stream_needle_poses(&cfg, &traj, 0.0), stream_needle_poses(&cfg, &traj, 0.0));
}

#[test]
fn registration_recovers_interventional_offset() {
    let cfg = PhantomConfig::default();
    let ph = generate_phantom(&cfg).unwrap();
    let r = register_rigid_mi(&ph.interventional_ct, &ph.comp_ct, &Rigid::identity(), &RegistrationConfig::default())
        .unwrap();
    // the registration maps interventional → compensated, the inverse of the offset
    let est = r.final_transform.inverse();
    let voxel = ph.interventional_ct.spacing();
    let probe = ph.interventional_ct.center();
    for corner in ph.comp_ct.corners().iter().chain([probe].iter()) {
        let err = (est.apply(corner) - cfg.interventional_offset.apply(corner)).abs();
        assert!(err.x <= 0.5 * voxel.x && err.y <= 0.5 * voxel.y && err.z <= 0.5 * voxel.z, "error {err:?}");
    }
}

#[test]
fn static_identity_chain_recomputes_tip() {
    let cfg = identity_chain();
    let p = [12.0, -4.0, 30.0];
    let traj = Trajectory::Static { tip: p, direction: [0.3, 0.1, -1.0], duration: 1.0 };
    let truth = petnav_core::GroundTruth::from_config(&cfg);
    for pose in stream_needle_poses(&cfg, &traj, 0.0) {
        let tip = tip_in_image(&pose, &truth.tip_offset, &truth.tracker_to_image);
        assert!((tip - Vec3::from(p)).norm() <= 1e-6);
    }
}

#[test]
fn pivoting_stream_recovers_tip_offset() {
    let cfg = PhantomConfig::default();
    let traj = Trajectory::Pivot { pivot: [20.0, 10.0, 60.0], axis: [0.0, 0.2, 1.0], max_tilt_deg: 30.0, duration: 3.0 };
    let poses = stream_needle_poses(&cfg, &traj, 0.0);
    let r = solve_pivot(&poses).unwrap();
    assert!((r.tip_offset - Vec3::from(cfg.tip_offset)).norm() <= 1e-6, "{:?}", r.tip_offset);
    let pivot_tracker = cfg.tracker_to_image.inverse().apply(&Vec3::new(20.0, 10.0, 60.0));
    assert!((r.pivot_point - pivot_tracker).norm() <= 1e-6);
}

#[test]
fn noisy_stream_spread_matches_sigma() {
    let cfg = PhantomConfig { pose_noise_sigma: 0.5, stream_rate: 100.0, ..PhantomConfig::default() };
    let traj = Trajectory::Static { tip: [0.0, 5.0, 10.0], direction: [0.0, 0.0, 1.0], duration: 9.99 };
    let truth = petnav_core::GroundTruth::from_config(&cfg);
    let tips: Vec<Vec3<f64>> = stream_needle_poses(&cfg, &traj, 0.0)
        .iter()
        .map(|p| tip_in_image(p, &truth.tip_offset, &truth.tracker_to_image))
        .collect();
    assert_eq!(tips.len(), 1000);
    let mean = tips.iter().sum::<Vec3<f64>>() / tips.len() as f64;
    for a in 0..3 {
        let var = tips.iter().map(|t| (t[a] - mean[a]).powi(2)).sum::<f64>() / (tips.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((0.3..=0.7).contains(&sd), "axis {a} sd {sd}");
    }
}

#[test]
fn breathing_moves_the_tip_along_z() {
    let cfg = PhantomConfig { respiration_enabled: true, ..identity_chain() };
    let traj = Trajectory::Static { tip: [0.0, 0.0, 0.0], direction: [0.0, 0.0, 1.0], duration: 5.0 };
    let truth = petnav_core::GroundTruth::from_config(&cfg);
    let poses = stream_needle_poses(&cfg, &traj, 0.0);
    for pose in &poses {
        let tip = tip_in_image(pose, &truth.tip_offset, &truth.tracker_to_image);
        let expected = respiration_displacement(pose.timestamp, cfg.respiration_rate, cfg.respiration_amplitude);
        assert!((tip - Vec3::new(0.0, 0.0, expected)).norm() <= 1e-9);
    }
}

#[test]
fn fiducial_touches_identity_chain() {
    let cfg = identity_chain();
    for ((_, t), f) in fiducial_touch_sequence(&cfg, 0.0, 1).iter().zip(&cfg.fiducials) {
        assert!((t - Vec3::from(*f)).norm() <= 1e-12);
    }
}

fn pairs_from(cfg: &PhantomConfig, sigma: f64, seed: u64) -> Vec<LandmarkPair<f64>> {
    fiducial_touch_sequence(cfg, sigma, seed)
        .into_iter()
        .zip(&cfg.fiducials)
        .map(|((label, t), f)| LandmarkPair::new(label, Vec3::from(*f), t))
        .collect()
}

#[test]
fn fiducial_touches_recover_tracker_to_image() {
    let cfg = PhantomConfig::default();
    let r = register_landmarks(&pairs_from(&cfg, 0.0, 0)).unwrap();
    assert!((r.transform.rotation - cfg.tracker_to_image.rotation).amax() <= 1e-9);
    assert!((r.transform.translation - cfg.tracker_to_image.translation).amax() <= 1e-9);
}

#[test]
fn noisy_fiducials_give_bounded_rotation_error() {
    let cfg = PhantomConfig::default();
    let mut errors: Vec<f64> = (0..100)
        .map(|seed| {
            let r = register_landmarks(&pairs_from(&cfg, 1.0, seed)).unwrap();
            assert!(r.rmse > 0.0);
            rotation_angle_between(&r.transform.rotation, &cfg.tracker_to_image.rotation).to_degrees()
        })
        .collect();
    errors.sort_by(f64::total_cmp);
    let median = (errors[49] + errors[50]) / 2.0;
    assert!(median < 2.0, "median rotation error {median} deg");
}

#[test]
fn respiration_is_periodic_and_bounded() {
    let (rate, amp) = (15.0, 8.0);
    let period = 60.0 / rate;
    for n in 0..200 {
        let t = n as f64 * 0.037;
        let d = respiration_displacement(t, rate, amp);
        assert!((0.0..=amp).contains(&d));
        assert!((respiration_displacement(t + period, rate, amp) - d).abs() <= 1e-9);
    }
}
