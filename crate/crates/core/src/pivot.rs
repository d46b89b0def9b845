//! Pivot calibration: recovers the needle-tip offset in the sensor frame from
//! poses recorded while the tool pivots about a fixed tip position.
//!
//! Each pose contributes `R_i·tip + p_i = pivot`, i.e. three rows of the
//! linear system `[R_i | −I]·(tip; pivot) = −p_i`, solved in the least-squares
//! sense by Householder QR.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{is_rotation, Mat3, Real, Vec3};

pub const DEFAULT_MIN_POSES: usize = 20;
pub const DEFAULT_DIVERSITY_THRESHOLD: f64 = 0.15;
/// Largest accepted condition number of the normal matrix `AᵀA`.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PivotError {
    #[error("pose rotation is not orthonormal")]
    InvalidRotation,
    #[error("not enough pivoting data: {n} poses, rotation diversity {diversity:.3}")]
    NotReady { n: usize, diversity: f64 },
    #[error("pivot system is ill-conditioned (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("no poses")]
    Empty,
}

/// Timestamped tracked-sensor pose in tracker coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PoseSample<T: Real> {
    #[serde(with = "crate::serde_vec3::mat3")]
    pub rotation: Mat3<T>,
    #[serde(with = "crate::serde_vec3")]
    pub position: Vec3<T>,
    /// Seconds on the sender's clock.
    pub timestamp: f64,
}

impl<T: Real> PoseSample<T> {
    pub fn new(rotation: Mat3<T>, position: Vec3<T>, timestamp: f64) -> Self {
        Self { rotation, position, timestamp }
    }

    pub fn validate(&self) -> Result<(), PivotError> {
        let tol = if T::ortho_tol() > T::lit(1e-6) { T::ortho_tol() } else { T::lit(1e-6) };
        if is_rotation(&self.rotation, tol) && self.position.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PivotError::InvalidRotation)
        }
    }

    /// Sensor-frame point expressed in tracker coordinates.
    pub fn apply(&self, local: &Vec3<T>) -> Vec3<T> {
        self.rotation * local + self.position
    }

    /// 13 numbers: row-major rotation, position, timestamp.
    pub fn to_record(&self) -> [f64; 13] {
        let mut out = [0.0; 13];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.rotation[(r, c)].as_f64();
            }
            out[9 + r] = self.position[r].as_f64();
        }
        out[12] = self.timestamp;
        out
    }

    pub fn from_record(v: &[f64; 13]) -> Self {
        Self {
            rotation: Mat3::from_row_slice(&v[..9]).map(T::lit),
            position: Vec3::new(T::lit(v[9]), T::lit(v[10]), T::lit(v[11])),
            timestamp: v[12],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PivotResult<T: Real> {
    /// Tip position in the sensor frame (mm).
    #[serde(with = "crate::serde_vec3")]
    pub tip_offset: Vec3<T>,
    /// Fixed pivot point in tracker coordinates (mm).
    #[serde(with = "crate::serde_vec3")]
    pub pivot_point: Vec3<T>,
    pub rms_residual: T,
    pub n_poses: usize,
}

/// Pose accumulator with a readiness rule.
///
/// Ready once at least `min_poses` samples are held and the rotation
/// diversity exceeds `diversity_threshold`. Diversity is the smallest singular
/// value of the stacked `R_i − R̄` matrix divided by `√n`, which equals
/// `sqrt(λ_min(I − R̄ᵀR̄))` and is kept incrementally from the rotation sum.
#[derive(Debug, Clone)]
pub struct PivotBuffer<T: Real> {
    poses: Vec<PoseSample<T>>,
    rotation_sum: Mat3<T>,
    min_poses: usize,
    diversity_threshold: T,
}

impl<T: Real> Default for PivotBuffer<T> {
    fn default() -> Self {
        Self::new(DEFAULT_MIN_POSES, T::lit(DEFAULT_DIVERSITY_THRESHOLD))
    }
}

impl<T: Real> PivotBuffer<T> {
    pub fn new(min_poses: usize, diversity_threshold: T) -> Self {
        Self { poses: Vec::new(), rotation_sum: Mat3::zeros(), min_poses, diversity_threshold }
    }

    /// Appends a pose; returns the readiness flag.
    pub fn accumulate(&mut self, s: PoseSample<T>) -> Result<bool, PivotError> {
        s.validate()?;
        self.rotation_sum += s.rotation;
        self.poses.push(s);
        Ok(self.is_ready())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[PoseSample<T>] {
        &self.poses
    }

    pub fn clear(&mut self) {
        self.poses.clear();
        self.rotation_sum = Mat3::zeros();
    }

    pub fn diversity(&self) -> T {
        if self.poses.is_empty() {
            return T::zero();
        }
        let mean = self.rotation_sum / T::lit(self.poses.len() as f64);
        let g = Mat3::identity() - mean.transpose() * mean;
        let g = (g + g.transpose()) * T::lit(0.5);
        let lmin = g
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .reduce(|m, x| if x < m { x } else { m })
            .unwrap_or(T::zero());
        if lmin > T::zero() {
            lmin.sqrt()
        } else {
            T::zero()
        }
    }

    pub fn is_ready(&self) -> bool {
        self.poses.len() >= self.min_poses && self.diversity() > self.diversity_threshold
    }
}

/// Calibrates from a buffer; fails unless the buffer is ready.
pub fn pivot_calibrate<T: Real>(buffer: &PivotBuffer<T>) -> Result<PivotResult<T>, PivotError> {
    if !buffer.is_ready() {
        return Err(PivotError::NotReady { n: buffer.len(), diversity: buffer.diversity().as_f64() });
    }
    solve_pivot(buffer.poses())
}

/// Least-squares pivot solve without the readiness gate.
pub fn solve_pivot<T: Real>(poses: &[PoseSample<T>]) -> Result<PivotResult<T>, PivotError> {
    if poses.is_empty() {
        return Err(PivotError::Empty);
    }
    let n = poses.len();
    let mut a = DMatrix::<T>::zeros(3 * n, 6);
    let mut b = DVector::<T>::zeros(3 * n);
    for (i, s) in poses.iter().enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                a[(3 * i + r, c)] = s.rotation[(r, c)];
            }
            a[(3 * i + r, 3 + r)] = -T::one();
            b[3 * i + r] = -s.position[r];
        }
    }
    if n < 2 {
        return Err(PivotError::IllConditioned(f64::INFINITY));
    }

    let qr = a.qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smax = sv.iter().fold(T::zero(), |m, &x| if x > m { x } else { m });
    let smin = sv.iter().fold(smax, |m, &x| if x < m { x } else { m });
    let cond = if smin > T::zero() { (smax / smin).as_f64().powi(2) } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(PivotError::IllConditioned(cond));
    }
    let qtb = qr.q().transpose() * &b;
    let x = r.solve_upper_triangular(&qtb).ok_or(PivotError::IllConditioned(f64::INFINITY))?;
    let tip_offset = Vec3::new(x[0], x[1], x[2]);
    let pivot_point = Vec3::new(x[3], x[4], x[5]);
    let rms_residual = pivot_rms(poses, &tip_offset, &pivot_point);
    Ok(PivotResult { tip_offset, pivot_point, rms_residual, n_poses: n })
}

/// `sqrt(mean‖R_i·tip + p_i − pivot‖²)`.
pub fn pivot_rms<T: Real>(poses: &[PoseSample<T>], tip: &Vec3<T>, pivot: &Vec3<T>) -> T {
    let sum = poses.iter().fold(T::zero(), |acc, s| acc + (s.apply(tip) - pivot).norm_squared());
    (sum / T::lit(poses.len() as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{axis_angle, euler_zyx};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const TIP: [f64; 3] = [0.0, 0.0, 100.0];
    const PIVOT: [f64; 3] = [50.0, 20.0, -30.0];

    fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3<f64> {
        euler_zyx(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-3.1..3.1))
    }

    fn forward(rotations: &[Mat3<f64>], tip: Vec3<f64>, pivot: Vec3<f64>) -> Vec<PoseSample<f64>> {
        rotations
            .iter()
            .enumerate()
            .map(|(i, r)| PoseSample::new(*r, pivot - r * tip, i as f64 * 0.05))
            .collect()
    }

    fn cone_sweep(n: usize, half_angle_deg: f64) -> Vec<Mat3<f64>> {
        (0..n)
            .map(|i| {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                axis_angle(&Vec3::new(-phi.sin(), phi.cos(), 0.0), half_angle_deg.to_radians())
            })
            .collect()
    }

    #[test]
    fn identical_poses_never_ready() {
        let mut buf = PivotBuffer::<f64>::default();
        for _ in 0..10 {
            assert!(!buf.accumulate(PoseSample::new(Mat3::identity(), Vec3::zeros(), 0.0)).unwrap());
        }
        assert_eq!(buf.diversity(), 0.0);
        for _ in 0..30 {
            buf.accumulate(PoseSample::new(Mat3::identity(), Vec3::zeros(), 0.0)).unwrap();
        }
        assert!(!buf.is_ready());
        assert!(matches!(pivot_calibrate(&buf), Err(PivotError::NotReady { .. })));
    }

    #[test]
    fn cone_sweep_becomes_ready() {
        let rots = cone_sweep(30, 30.0);
        // oracle: mean rotation of a non-twisting 30° sweep is diag(c+(1-c)/2, c+(1-c)/2, c)
        let c = 30f64.to_radians().cos();
        let m = c + (1.0 - c) / 2.0;
        let expected = (1.0 - m * m).min(1.0 - c * c).sqrt();
        let mut buf = PivotBuffer::default();
        let mut ready = false;
        for p in forward(&rots, Vec3::from(TIP), Vec3::from(PIVOT)) {
            ready = buf.accumulate(p).unwrap();
        }
        assert_abs_diff_eq!(buf.diversity(), expected, epsilon = 1e-9);
        assert!(ready);
    }

    #[test]
    fn rejects_scaled_rotation() {
        let mut buf = PivotBuffer::<f64>::default();
        let mut r = Mat3::identity();
        r.row_mut(0).scale_mut(2.0);
        assert_eq!(buf.accumulate(PoseSample::new(r, Vec3::zeros(), 0.0)), Err(PivotError::InvalidRotation));
        assert!(buf.is_empty());
    }

    #[test]
    fn exact_recovery_noise_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rots: Vec<_> = (0..20).map(|_| random_rotation(&mut rng)).collect();
        let poses = forward(&rots, Vec3::from(TIP), Vec3::from(PIVOT));
        let mut buf = PivotBuffer::default();
        poses.iter().for_each(|p| {
            buf.accumulate(*p).unwrap();
        });
        let res = pivot_calibrate(&buf).unwrap();
        assert_abs_diff_eq!(res.tip_offset, Vec3::from(TIP), epsilon = 1e-9);
        assert_abs_diff_eq!(res.pivot_point, Vec3::from(PIVOT), epsilon = 1e-9);
        assert!(res.rms_residual < 1e-9);
        assert_eq!(res.n_poses, 20);
        assert_abs_diff_eq!(res.rms_residual, pivot_rms(&poses, &res.tip_offset, &res.pivot_point), epsilon = 1e-12);
    }

    #[test]
    fn noisy_recovery_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = 0.2;
        let n = 20;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut tip_errors = Vec::new();
        let mut rms = Vec::new();
        for _ in 0..100 {
            let rots: Vec<_> = (0..n).map(|_| random_rotation(&mut rng)).collect();
            let mut poses = forward(&rots, Vec3::from(TIP), Vec3::from(PIVOT));
            for p in poses.iter_mut() {
                p.position += Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let res = solve_pivot(&poses).unwrap();
            tip_errors.push((res.tip_offset - Vec3::from(TIP)).norm());
            rms.push(res.rms_residual);
        }
        tip_errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(tip_errors[50] < 0.5, "median tip error {}", tip_errors[50]);
        // expected residual for per-axis noise: sigma * sqrt(3 (n - 2) / n)
        let expected = sigma * (3.0 * (n as f64 - 2.0) / n as f64).sqrt();
        let mean_rms = rms.iter().sum::<f64>() / rms.len() as f64;
        assert!((mean_rms - expected).abs() < 0.5 * expected, "mean rms {mean_rms} vs {expected}");
    }

    #[test]
    fn shared_axis_is_ill_conditioned() {
        let rots: Vec<_> = (0..25).map(|i| axis_angle(&Vec3::z(), i as f64 * 0.2)).collect();
        let poses = forward(&rots, Vec3::from(TIP), Vec3::from(PIVOT));
        assert!(matches!(solve_pivot(&poses), Err(PivotError::IllConditioned(_))));
        let mut buf = PivotBuffer::default();
        poses.into_iter().for_each(|p| {
            buf.accumulate(p).unwrap();
        });
        assert!(!buf.is_ready());
    }

    #[test]
    fn record_round_trip() {
        let p = PoseSample::new(euler_zyx(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0), 4.5);
        assert_eq!(PoseSample::<f64>::from_record(&p.to_record()), p);
    }
}
