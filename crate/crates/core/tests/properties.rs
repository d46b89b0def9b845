use proptest::prelude::*;

use petnav_core::intensity::{entropy_bits, JointHistogram};
use petnav_core::landmark::{register_landmarks, LandmarkPair};
use petnav_core::nrrd::{encode_nrrd, parse_nrrd};
use petnav_core::pivot::{solve_pivot, PoseSample};
use petnav_core::planning::{compute_guidance, make_plan};
use petnav_core::scalar::{axis_angle, euler_zyx};
use petnav_core::transforms::{bspline_basis, BSplineGrid, Rigid};
use petnav_core::volume::{SliceAxis, WindowLevel};
use petnav_core::{Mat3, Modality, ScalarType, Vec3, Volume};

fn vec3(range: f64) -> impl Strategy<Value = Vec3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vec3::from)
}

fn rotation() -> impl Strategy<Value = Mat3<f64>> {
    (prop::array::uniform3(-1.0..1.0f64), 0.0..std::f64::consts::PI).prop_filter_map("zero axis", |(a, ang)| {
        let axis = Vec3::from(a);
        (axis.norm() > 1e-3).then(|| axis_angle(&axis, ang))
    })
}

fn rigid() -> impl Strategy<Value = Rigid<f64>> {
    (rotation(), vec3(200.0)).prop_map(|(r, t)| Rigid { rotation: r, translation: t })
}

fn small_volume() -> impl Strategy<Value = Volume> {
    (
        prop::array::uniform3(1usize..6),
        prop::array::uniform3(0.1..5.0f64),
        vec3(100.0),
        rotation(),
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(dims, spacing, origin, dir, int, seed)| {
            let n = dims.iter().product::<usize>();
            let mut x = seed;
            let data = (0..n)
                .map(|_| {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let u = (x >> 33) as i64 % 4000 - 2000;
                    if int {
                        u as f64
                    } else {
                        (u as f32 / 7.0) as f64
                    }
                })
                .collect();
            let st = if int { ScalarType::Int16 } else { ScalarType::Float32 };
            Volume::new(dims, Vec3::from(spacing), origin, dir, data, Modality::Pet, st).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn nrrd_round_trip_is_exact(v in small_volume()) {
        let back = parse_nrrd(&encode_nrrd(&v)).unwrap();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn world_index_round_trip(v in small_volume(), idx in prop::array::uniform3(-3.0..8.0f64)) {
        let idx = Vec3::from(idx);
        let back = v.world_to_index(&v.index_to_world(&idx));
        prop_assert!((back - idx).amax() <= 1e-9);
    }

    #[test]
    fn sampling_is_exact_on_voxel_centres(v in small_volume(), pick in any::<prop::sample::Index>()) {
        let n = pick.index(v.len());
        let d = v.dims();
        let (i, j, k) = (n % d[0], (n / d[0]) % d[1], n / (d[0] * d[1]));
        let p = v.index_to_world(&Vec3::new(i as f64, j as f64, k as f64));
        prop_assert!((v.sample(&p).unwrap() - v.value(i, j, k)).abs() <= 1e-9 * (1.0 + v.value(i, j, k).abs()));
    }

    #[test]
    fn slices_are_normalized(v in small_volume(), window in 1.0..5000.0f64, level in -2000.0..2000.0f64, axis in 0usize..3) {
        let axis = [SliceAxis::Axial, SliceAxis::Coronal, SliceAxis::Sagittal][axis];
        let index = v.dims()[axis.normal_axis()] / 2;
        let plane = v.extract_slice(axis, index, WindowLevel::new(window, level).unwrap()).unwrap();
        prop_assert!(plane.data.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn basis_is_a_partition_of_unity(u in 0.0..1.0f64) {
        let b = bspline_basis(u).unwrap();
        prop_assert!(b.iter().all(|w| *w >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rigid_group_laws(a in rigid(), b in rigid(), c in rigid(), p in vec3(300.0)) {
        let left = a.compose(&b).compose(&c).apply(&p);
        let right = a.compose(&b.compose(&c)).apply(&p);
        prop_assert!((left - right).norm() <= 1e-9);
        prop_assert!((a.inverse().apply(&a.apply(&p)) - p).norm() <= 1e-9);
        prop_assert!((a.compose(&Rigid::identity()).apply(&p) - a.apply(&p)).norm() <= 1e-12);
        prop_assert!(a.compose(&b).validate().is_ok());
    }

    #[test]
    fn ffd_is_c2_across_knots(seed in any::<u64>(), y in 0.0..1.0f64, z in 0.0..1.0f64, knot in 2usize..4) {
        let mut g = BSplineGrid::covering(Vec3::zeros(), Vec3::repeat(30.0), Vec3::repeat(10.0)).unwrap();
        let mut x = seed;
        for d in g.displacements.iter_mut() {
            for a in 0..3 {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                d[a] = ((x >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 4.0;
            }
        }
        // a knot plane x = const inside the covered box
        let kx = g.grid_origin.x + knot as f64 * g.grid_spacing.x;
        let at = |dx: f64| g.displacement(&Vec3::new(kx + dx, 5.0 + 20.0 * y, 5.0 + 20.0 * z)).unwrap();
        let h = 1e-3;
        // value, first and second one-sided differences agree on both sides of the knot
        let left_d1 = (at(0.0) - at(-h)) / h;
        let right_d1 = (at(h) - at(0.0)) / h;
        let left_d2 = (at(0.0) - at(-h) * 2.0 + at(-2.0 * h)) / (h * h);
        let right_d2 = (at(2.0 * h) - at(h) * 2.0 + at(0.0)) / (h * h);
        prop_assert!((at(1e-9) - at(-1e-9)).amax() <= 1e-7);
        prop_assert!((left_d1 - right_d1).amax() <= 1e-3);
        prop_assert!((left_d2 - right_d2).amax() <= 2e-2);
    }

    #[test]
    fn landmark_fit_is_frame_covariant(
        pts in prop::collection::vec(vec3(100.0), 4..10),
        t in rigid(),
        g in rigid(),
        noise in prop::collection::vec(vec3(1.0), 10),
    ) {
        let pairs: Vec<LandmarkPair<f64>> = pts
            .iter()
            .zip(&noise)
            .enumerate()
            .map(|(i, (p, n))| LandmarkPair::new(format!("{i}"), t.apply(p) + n, *p))
            .collect();
        let Ok(base) = register_landmarks(&pairs) else { return Ok(()) };
        // moving the image frame by g moves the solution by g
        let moved: Vec<_> = pairs.iter().map(|p| LandmarkPair::new(p.label.clone(), g.apply(&p.image_point), p.tracker_point)).collect();
        let r = register_landmarks(&moved).unwrap();
        let expected = g.compose(&base.transform);
        prop_assert!((r.transform.rotation - expected.rotation).amax() <= 1e-7);
        prop_assert!((r.rmse - base.rmse).abs() <= 1e-7);
        // pair order does not matter
        let mut rev = pairs.clone();
        rev.reverse();
        let r = register_landmarks(&rev).unwrap();
        prop_assert!((r.transform.rotation - base.transform.rotation).amax() <= 1e-9);
        prop_assert!((r.transform.rotation.determinant() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn mi_symmetry_bounds_and_relabeling(
        counts in prop::collection::vec(0u32..20, 16),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mut h = JointHistogram::empty(4, (0.0, 1.0), (0.0, 1.0));
        h.counts = counts.iter().map(|&c| c as f64).collect();
        prop_assume!(h.total() > 0.0);
        let mi = h.mutual_information();
        prop_assert!((h.transposed().mutual_information() - mi).abs() <= 1e-12);
        let bound = entropy_bits(&h.fixed_marginal()).min(entropy_bits(&h.moving_marginal()));
        prop_assert!(mi >= 0.0 && mi <= bound + 1e-9);
        let mut p = h.clone();
        for (f, &pf) in perm.iter().enumerate() {
            for m in 0..4 {
                p.counts[pf * 4 + m] = h.counts[f * 4 + m];
            }
        }
        prop_assert!((p.mutual_information() - mi).abs() <= 1e-12);
    }

    #[test]
    fn pivot_is_frame_covariant(tip in vec3(80.0), pivot in vec3(300.0), shift in vec3(100.0), q in rotation(), seed in any::<u64>()) {
        prop_assume!(tip.norm() > 10.0);
        let mut x = seed;
        let mut next = || {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let poses: Vec<PoseSample<f64>> = (0..24)
            .map(|i| {
                let r = euler_zyx(next(), next(), 2.0 * next());
                PoseSample::new(r, pivot - r * tip, i as f64)
            })
            .collect();
        let base = solve_pivot(&poses).unwrap();
        let moved: Vec<_> = poses.iter().map(|p| PoseSample::new(q * p.rotation, q * p.position + shift, p.timestamp)).collect();
        let r = solve_pivot(&moved).unwrap();
        prop_assert!((r.tip_offset - base.tip_offset).norm() <= 1e-6);
        prop_assert!((r.pivot_point - (q * base.pivot_point + shift)).norm() <= 1e-6);
    }

    #[test]
    fn guidance_invariants(entry in vec3(100.0), target in vec3(100.0), tip in vec3(150.0), r in rotation(), off in vec3(100.0)) {
        prop_assume!((target - entry).norm() > 1.0);
        let plan = make_plan(entry, target).unwrap();
        let pose = PoseSample::new(r, tip, 0.0);
        let g = compute_guidance(&plan, &pose, &off, &Rigid::identity(), 0.1);
        prop_assert!(g.lateral_deviation >= 0.0);
        prop_assert!((0.0..=180.0).contains(&g.angle_deviation));
        // depth and lateral offsets are the two legs of the triangle to the target
        let to_target = (plan.target - g.tip_image).norm();
        let legs = (g.depth_remaining.powi(2) + g.lateral_deviation.powi(2)).sqrt();
        prop_assert!((to_target - legs).abs() <= 1e-6 * (1.0 + to_target));
        // a tip on the plan line has no lateral error
        let on_line = entry + plan.direction * 0.37 * plan.length;
        prop_assert!(plan.lateral_deviation(&on_line) <= 1e-9 * (1.0 + on_line.norm()));
    }
}
