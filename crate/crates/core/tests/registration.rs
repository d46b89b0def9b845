use petnav_core::intensity::{
    joint_histogram, register_bspline_mi, register_rigid_mi, BinAccumulation, RegistrationConfig, RegistrationError,
};
use petnav_core::scalar::{axis_angle, rotation_angle_between};
use petnav_core::transforms::{BSplineGrid, Deformable, Rigid};
use petnav_core::{Mat3, Modality, ScalarType, Vec3, Volume};

const BLOBS: [([f64; 3], f64, f64); 6] = [
    ([-12.0, -6.0, 4.0], 9.0, 900.0),
    ([10.0, 8.0, -5.0], 7.0, 600.0),
    ([3.0, -14.0, -10.0], 5.0, 750.0),
    ([-6.0, 13.0, 11.0], 6.0, 400.0),
    ([15.0, -4.0, 12.0], 4.0, 500.0),
    ([0.0, 0.0, -16.0], 8.0, 300.0),
];

fn blob(p: &Vec3<f64>) -> f64 {
    BLOBS
        .iter()
        .map(|(c, s, a)| a * (-(p - Vec3::from(*c)).norm_squared() / (2.0 * s * s)).exp())
        .sum()
}

fn volume(n: usize, spacing: f64, f: impl Fn(&Vec3<f64>) -> f64) -> Volume {
    let origin = Vec3::repeat(-((n - 1) as f64) * spacing / 2.0);
    Volume::from_fn([n; 3], Vec3::repeat(spacing), origin, Mat3::identity(), Modality::Ct, ScalarType::Float32, |p| f(&p))
        .unwrap()
}

/// Moving image such that `moving(t(p)) == fixed(p)`.
fn warped_by(t: &Rigid<f64>, n: usize) -> Volume {
    let inv = t.inverse();
    volume(n, 1.0, |y| blob(&inv.apply(y)))
}

#[test]
fn self_registration_stays_at_identity() {
    let fixed = volume(32, 2.0, blob);
    let r = register_rigid_mi(&fixed, &fixed, &Rigid::identity(), &RegistrationConfig::default()).unwrap();
    assert_eq!(r.final_transform, Rigid::identity());
    assert_eq!(r.final_mi, r.initial_mi);
}

#[test]
fn recovers_known_translation() {
    let truth = Rigid::from_translation(Vec3::new(4.5, -3.0, 2.0));
    let fixed = volume(64, 1.0, blob);
    let moving = warped_by(&truth, 64);
    let r = register_rigid_mi(&fixed, &moving, &Rigid::identity(), &RegistrationConfig::default()).unwrap();
    let err = r.final_transform.translation - truth.translation;
    assert!(err.amax() <= 0.5, "translation error {err:?}");
    assert!(rotation_angle_between(&r.final_transform.rotation, &truth.rotation).to_degrees() < 0.5);
    assert!(r.final_mi >= r.initial_mi);
    assert!(r.converged);
    assert!(r.mi_trace.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn recovers_known_rotation() {
    let fixed = volume(64, 1.0, blob);
    let truth = Rigid::about_center(axis_angle(&Vec3::z(), 5f64.to_radians()), fixed.center(), Vec3::zeros());
    let moving = warped_by(&truth, 64);
    let r = register_rigid_mi(&fixed, &moving, &Rigid::identity(), &RegistrationConfig::default()).unwrap();
    let angle = rotation_angle_between(&r.final_transform.rotation, &truth.rotation).to_degrees();
    assert!(angle < 0.5, "rotation error {angle} deg");
    let err = r.final_transform.translation - truth.translation;
    assert!(err.amax() <= 0.5, "translation error {err:?}");
}

#[test]
fn registration_is_deterministic() {
    let fixed = volume(32, 2.0, blob);
    let moving = volume(32, 2.0, |p| blob(&(p - Vec3::new(2.0, 1.0, 0.0))));
    let cfg = RegistrationConfig::default();
    let a = register_rigid_mi(&fixed, &moving, &Rigid::identity(), &cfg).unwrap();
    let b = register_rigid_mi(&fixed, &moving, &Rigid::identity(), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_overlap_is_rejected() {
    let fixed = volume(16, 2.0, blob);
    let far = Rigid::from_translation(Vec3::new(500.0, 0.0, 0.0));
    let cfg = RegistrationConfig::default();
    assert!(matches!(register_rigid_mi(&fixed, &fixed, &far, &cfg), Err(RegistrationError::EmptyOverlap)));
    assert!(matches!(register_bspline_mi(&fixed, &fixed, &far, &cfg), Err(RegistrationError::EmptyOverlap)));
    let partial = Rigid::from_translation(Vec3::new(26.0, 0.0, 0.0));
    assert!(matches!(
        register_rigid_mi(&fixed, &fixed, &partial, &cfg),
        Err(RegistrationError::InsufficientOverlap { .. })
    ));
}

/// Smooth field built on its own control lattice; a fixed image sampled
/// through it is matched by the undeformed moving image.
fn true_field(fixed: &Volume) -> BSplineGrid<f64> {
    let (lo, hi) = fixed.world_bounds();
    let mut g = BSplineGrid::covering(lo, hi, Vec3::repeat(16.0)).unwrap();
    let [nx, ny, nz] = g.grid_dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let (x, y, z) = (i as f64 / nx as f64, j as f64 / ny as f64, k as f64 / nz as f64);
                let idx = g.index(i, j, k);
                g.displacements[idx] = Vec3::new(
                    2.5 * (std::f64::consts::PI * 2.0 * y).sin(),
                    -2.0 * (std::f64::consts::PI * 2.0 * z).cos(),
                    1.5 * (std::f64::consts::PI * 2.0 * x).sin(),
                );
            }
        }
    }
    g
}

fn mse(a: &Volume, b: &Volume, map: impl Fn(&Vec3<f64>) -> Option<Vec3<f64>>) -> f64 {
    let [nx, ny, nz] = a.dims();
    let (mut sum, mut n) = (0.0, 0usize);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let p = a.index_to_world(&Vec3::new(i as f64, j as f64, k as f64));
                if let Some(v) = map(&p).and_then(|q| b.sample(&q)) {
                    sum += (a.value(i, j, k) - v).powi(2);
                    n += 1;
                }
            }
        }
    }
    sum / n as f64
}

#[test]
fn bspline_reduces_warp_error() {
    let moving = volume(48, 1.0, blob);
    let field = true_field(&moving);
    let warp = Deformable { rigid: Rigid::identity(), grid: field.clone() };
    // fixed(p) = moving(p + d(p))
    let fixed = volume(48, 1.0, |p| blob(&warp.apply(p).unwrap()));
    let max_true = (0..fixed.len())
        .map(|n| {
            let d = fixed.dims();
            let p = fixed.index_to_world(&Vec3::new((n % d[0]) as f64, ((n / d[0]) % d[1]) as f64, (n / (d[0] * d[1])) as f64));
            field.displacement(&p).unwrap().norm()
        })
        .fold(0.0, f64::max);
    assert!(max_true <= 4.0 && max_true > 1.5, "warp magnitude {max_true}");

    let cfg = RegistrationConfig::default();
    let r = register_bspline_mi(&fixed, &moving, &Rigid::identity(), &cfg).unwrap();
    let grid = r.grid.clone().unwrap();
    let recovered = Deformable { rigid: r.final_transform, grid };
    let before = mse(&fixed, &moving, |p| Some(*p));
    let after = mse(&fixed, &moving, |p| recovered.apply(p).ok());
    assert!(after <= 0.5 * before, "mse before {before:.2} after {after:.2}");
    assert!(r.final_mi >= r.initial_mi - 1e-9);
}

#[test]
fn bspline_self_registration_leaves_grid_near_zero() {
    let fixed = volume(32, 1.5, blob);
    let cfg = RegistrationConfig::default();
    let r = register_bspline_mi(&fixed, &fixed, &Rigid::identity(), &cfg).unwrap();
    let grid = r.grid.unwrap();
    assert!(grid.max_displacement() < 0.1 * grid.grid_spacing.min(), "max {}", grid.max_displacement());
    assert!(r.final_mi >= r.initial_mi - 1e-9);
}

#[test]
fn self_histogram_mi_equals_marginal_entropy() {
    let v = volume(16, 1.0, blob);
    let cfg = RegistrationConfig { sample_stride: 1, accumulation: BinAccumulation::Nearest, ..Default::default() };
    let h = joint_histogram(&v, &v, &Rigid::identity(), &cfg).unwrap();
    let h_fixed = petnav_core::intensity::entropy_bits(&h.fixed_marginal());
    assert!((h.mutual_information() - h_fixed).abs() < 1e-9);
}
