//! Point-based rigid registration of tracker space onto image space.
//!
//! Least-squares fit of `T` minimizing `Σ‖T(tracker_i) − image_i‖²` via
//! centroid alignment and SVD of the cross-covariance, with the determinant
//! correction that keeps the result a proper rotation.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Mat3, Real, Vec3};
use crate::transforms::Rigid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LandmarkError {
    #[error("need at least {needed} landmark pairs, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate landmark configuration (collinear or coincident points)")]
    Degenerate,
    #[error("landmark coordinates must be finite")]
    NonFinite,
    #[error("no landmark pairs given")]
    Empty,
}

pub const MIN_SOLVER_PAIRS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LandmarkPair<T: Real> {
    #[serde(with = "crate::serde_vec3")]
    pub image_point: Vec3<T>,
    #[serde(with = "crate::serde_vec3")]
    pub tracker_point: Vec3<T>,
    pub label: String,
}

impl<T: Real> LandmarkPair<T> {
    pub fn new(label: impl Into<String>, image_point: Vec3<T>, tracker_point: Vec3<T>) -> Self {
        Self { image_point, tracker_point, label: label.into() }
    }

    fn is_finite(&self) -> bool {
        self.image_point.iter().chain(self.tracker_point.iter()).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LandmarkRegistration<T: Real> {
    /// Maps tracker coordinates to image coordinates.
    pub transform: Rigid<T>,
    pub rmse: T,
    pub per_pair_residuals: Vec<T>,
}

fn centroid<T: Real>(pts: impl Iterator<Item = Vec3<T>>) -> Vec3<T> {
    let mut sum = Vec3::zeros();
    let mut n = 0usize;
    for p in pts {
        sum += p;
        n += 1;
    }
    sum / T::lit(n as f64)
}

pub fn register_landmarks<T: Real>(pairs: &[LandmarkPair<T>]) -> Result<LandmarkRegistration<T>, LandmarkError> {
    if pairs.len() < MIN_SOLVER_PAIRS {
        return Err(LandmarkError::TooFewPoints { needed: MIN_SOLVER_PAIRS, got: pairs.len() });
    }
    if !pairs.iter().all(LandmarkPair::is_finite) {
        return Err(LandmarkError::NonFinite);
    }
    let ct = centroid(pairs.iter().map(|p| p.tracker_point));
    let ci = centroid(pairs.iter().map(|p| p.image_point));

    // spread of the moving (tracker) points decides observability of the rotation
    let mut scatter = Mat3::<T>::zeros();
    let mut cov = Mat3::<T>::zeros();
    for p in pairs {
        let a = p.tracker_point - ct;
        let b = p.image_point - ci;
        scatter += a * a.transpose();
        cov += b * a.transpose();
    }
    // compared as eigenvalues (squared singular values) so rounding noise in a
    // rank-one scatter is not amplified by a square root
    let mut ev: Vec<T> = scatter.symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(ev[0] > T::zero()) || ev[1] <= T::rank_tol() * ev[0] {
        return Err(LandmarkError::Degenerate);
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.ok_or(LandmarkError::Degenerate)?;
    let v_t = svd.v_t.ok_or(LandmarkError::Degenerate)?;
    let d = (u * v_t).determinant();
    let sign = if d < T::zero() { -T::one() } else { T::one() };
    let rotation = u * Mat3::from_diagonal(&Vec3::new(T::one(), T::one(), sign)) * v_t;
    let transform = Rigid { rotation, translation: ci - rotation * ct };

    let per_pair_residuals: Vec<T> = pairs
        .iter()
        .map(|p| (transform.apply(&p.tracker_point) - p.image_point).norm())
        .collect();
    let rmse = rms(&per_pair_residuals);
    Ok(LandmarkRegistration { transform, rmse, per_pair_residuals })
}

fn rms<T: Real>(r: &[T]) -> T {
    let sum = r.iter().fold(T::zero(), |acc, &x| acc + x * x);
    (sum / T::lit(r.len() as f64)).sqrt()
}

/// Recomputes the RMS fiducial residual of `result.transform` over `pairs`.
pub fn fiducial_registration_error<T: Real>(
    result: &LandmarkRegistration<T>,
    pairs: &[LandmarkPair<T>],
) -> Result<T, LandmarkError> {
    if pairs.is_empty() {
        return Err(LandmarkError::Empty);
    }
    let residuals: Vec<T> = pairs
        .iter()
        .map(|p| (result.transform.apply(&p.tracker_point) - p.image_point).norm())
        .collect();
    Ok(rms(&residuals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn pairs_from(t: &Rigid<f64>, tracker: &[Vec3<f64>]) -> Vec<LandmarkPair<f64>> {
        tracker
            .iter()
            .enumerate()
            .map(|(i, p)| LandmarkPair::new(format!("F{i}"), t.apply(p), *p))
            .collect()
    }

    fn tetra() -> Vec<Vec3<f64>> {
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(50.0, 0.0, 0.0),
            Vec3::new(0.0, 40.0, 0.0),
            Vec3::new(10.0, 10.0, 30.0),
        ]
    }

    #[test]
    fn pure_translation() {
        let t = Rigid::from_translation(Vec3::new(10.0, -5.0, 2.0));
        let r = register_landmarks(&pairs_from(&t, &tetra())).unwrap();
        assert_abs_diff_eq!(r.transform.translation, t.translation, epsilon = 1e-12);
        assert_abs_diff_eq!(r.transform.rotation, Mat3::identity(), epsilon = 1e-12);
        assert!(r.rmse <= 1e-12);
    }

    #[test]
    fn quarter_turn_plus_translation() {
        let t = Rigid::from_axis_angle(Vec3::z(), FRAC_PI_2, Vec3::new(3.0, 7.0, -2.0));
        let r = register_landmarks(&pairs_from(&t, &tetra())).unwrap();
        assert_abs_diff_eq!(r.transform.rotation, t.rotation, epsilon = 1e-9);
        assert_abs_diff_eq!(r.transform.translation, t.translation, epsilon = 1e-9);
        assert!(r.rmse <= 1e-9);
    }

    #[test]
    fn collinear_and_too_few() {
        let line: Vec<_> = (0..3).map(|i| Vec3::new(i as f64, 2.0 * i as f64, 0.5 * i as f64)).collect();
        let pairs = pairs_from(&Rigid::identity(), &line);
        assert_eq!(register_landmarks(&pairs), Err(LandmarkError::Degenerate));
        let same = pairs_from(&Rigid::identity(), &[Vec3::repeat(1.0); 4]);
        assert_eq!(register_landmarks(&same), Err(LandmarkError::Degenerate));
        assert_eq!(
            register_landmarks(&pairs[..2]),
            Err(LandmarkError::TooFewPoints { needed: 3, got: 2 })
        );
    }

    #[test]
    fn planar_points_are_fine() {
        let t = Rigid::from_axis_angle(Vec3::new(1.0, 1.0, 0.0), 0.4, Vec3::new(1.0, 2.0, 3.0));
        let plane = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(10.0, 0.0, 0.0), Vec3::new(0.0, 10.0, 0.0)];
        let r = register_landmarks(&pairs_from(&t, &plane)).unwrap();
        assert_abs_diff_eq!(r.transform.rotation, t.rotation, epsilon = 1e-9);
        assert!((r.transform.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fre_recomputation_with_offset_point() {
        let t = Rigid::from_axis_angle(Vec3::new(0.2, 1.0, 0.1), 0.3, Vec3::new(5.0, 0.0, -4.0));
        let mut pairs = pairs_from(&t, &tetra());
        pairs[2].image_point += Vec3::new(2.0, 0.0, 0.0);
        let r = register_landmarks(&pairs).unwrap();
        let fre = fiducial_registration_error(&r, &pairs).unwrap();
        assert!(r.rmse > 0.0);
        assert_abs_diff_eq!(fre, r.rmse, epsilon = 1e-12);
        let ms: f64 = r.per_pair_residuals.iter().map(|x| x * x).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(r.rmse, ms.sqrt(), epsilon = 1e-12);
        assert_eq!(fiducial_registration_error(&r, &[]), Err(LandmarkError::Empty));
    }

    #[test]
    fn perfect_pairs_have_zero_fre() {
        let t = Rigid::from_translation(Vec3::new(1.0, 1.0, 1.0));
        let pairs = pairs_from(&t, &tetra());
        let r = register_landmarks(&pairs).unwrap();
        assert!(fiducial_registration_error(&r, &pairs).unwrap() < 1e-12);
    }

    #[test]
    fn reflection_is_corrected() {
        // image points are a mirror image of the tracker points plus noise; the
        // unconstrained orthogonal fit would be a reflection
        let tracker = tetra();
        let pairs: Vec<_> = tracker
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let jitter = Vec3::new(0.3 * i as f64, -0.2, 0.1 * (i % 2) as f64);
                LandmarkPair::new(format!("F{i}"), Vec3::new(p[0], p[1], -p[2]) + jitter, *p)
            })
            .collect();
        let mut cov = Mat3::zeros();
        let ct = centroid(pairs.iter().map(|p| p.tracker_point));
        let ci = centroid(pairs.iter().map(|p| p.image_point));
        for p in &pairs {
            cov += (p.image_point - ci) * (p.tracker_point - ct).transpose();
        }
        let svd = SVD::new(cov, true, true);
        let naive = svd.u.unwrap() * svd.v_t.unwrap();
        assert!(naive.determinant() < 0.0, "case must be adversarial");
        let r = register_landmarks(&pairs).unwrap();
        assert_abs_diff_eq!(r.transform.rotation.determinant(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn f32_instantiation() {
        let t: Rigid<f32> = Rigid::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), 0.5, Vec3::new(1.0, 2.0, 3.0));
        let pts: Vec<Vec3<f32>> = tetra().iter().map(|p| p.map(|x| x as f32)).collect();
        let pairs: Vec<_> = pts.iter().map(|p| LandmarkPair::new("x", t.apply(p), *p)).collect();
        let r = register_landmarks(&pairs).unwrap();
        assert!((r.transform.rotation - t.rotation).abs().max() < 1e-4);
    }
}
