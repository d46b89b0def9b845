//! Scalar abstraction shared by the geometric modules.
//!
//! The rigid-transform, landmark, pivot and planning code is written once over
//! [`Real`] and instantiated for `f64` (the default used by the rest of the
//! crate) and `f32` (matching the float32 wire precision of the tracker).

use nalgebra::{Matrix3, RealField, Vector3};
use num_traits::{FromPrimitive, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Floating-point scalar usable by the geometry code.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Serialize + DeserializeOwned {
    /// Converts an `f64` literal into this scalar type.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite literal")
    }

    /// Lossless (f64) or widening (f32) conversion for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance for orthonormality and determinant checks on rotations.
    ///
    /// `1e-9` for `f64`; scaled from machine epsilon for narrower types.
    fn ortho_tol() -> Self {
        let eps = Self::default_epsilon();
        let floor = Self::lit(1e-9);
        let scaled = eps * Self::lit(1e3);
        if scaled > floor {
            scaled
        } else {
            floor
        }
    }

    /// Relative tolerance for rank decisions on singular values.
    fn rank_tol() -> Self {
        let eps = Self::default_epsilon();
        let floor = Self::lit(1e-9);
        let scaled = eps * Self::lit(100.0);
        if scaled > floor {
            scaled
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// 3-vector used both for points (mm) and directions.
pub type Vec3<T> = Vector3<T>;
/// 3x3 matrix.
pub type Mat3<T> = Matrix3<T>;

/// Checks `RᵀR = I` entry-wise and `det R = +1` within `tol`.
pub fn is_rotation<T: Real>(r: &Mat3<T>, tol: T) -> bool {
    if !r.iter().all(|v| v.is_finite()) {
        return false;
    }
    let gram = r.transpose() * r;
    let ortho = (gram - Mat3::<T>::identity()).iter().all(|v| v.abs() <= tol);
    ortho && (r.determinant() - T::one()).abs() <= tol
}

/// Rotation of `angle` radians about `axis` (normalized internally).
pub fn axis_angle<T: Real>(axis: &Vec3<T>, angle: T) -> Mat3<T> {
    let unit = nalgebra::Unit::new_normalize(*axis);
    *nalgebra::Rotation3::from_axis_angle(&unit, angle).matrix()
}

/// `Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn euler_zyx<T: Real>(roll: T, pitch: T, yaw: T) -> Mat3<T> {
    let (sx, cx) = roll.sin_cos();
    let (sy, cy) = pitch.sin_cos();
    let (sz, cz) = yaw.sin_cos();
    let rx = Mat3::new(
        T::one(), T::zero(), T::zero(),
        T::zero(), cx, -sx,
        T::zero(), sx, cx,
    );
    let ry = Mat3::new(
        cy, T::zero(), sy,
        T::zero(), T::one(), T::zero(),
        -sy, T::zero(), cy,
    );
    let rz = Mat3::new(
        cz, -sz, T::zero(),
        sz, cz, T::zero(),
        T::zero(), T::zero(), T::one(),
    );
    rz * ry * rx
}

/// Inverse of [`euler_zyx`]: returns `(roll, pitch, yaw)`.
pub fn euler_zyx_angles<T: Real>(r: &Mat3<T>) -> (T, T, T) {
    let sy = -r[(2, 0)];
    let sy = sy.clamp(-T::one(), T::one());
    let pitch = sy.asin();
    if sy.abs() < T::one() - T::lit(1e-12) {
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        (roll, pitch, yaw)
    } else {
        // gimbal lock: fold everything into yaw
        let yaw = (-r[(0, 1)]).atan2(r[(1, 1)]);
        (T::zero(), pitch, yaw)
    }
}

/// Angle of the relative rotation `aᵀb`, in radians.
pub fn rotation_angle_between<T: Real>(a: &Mat3<T>, b: &Mat3<T>) -> T {
    let rel = a.transpose() * b;
    let c = (rel.trace() - T::one()) / T::lit(2.0);
    c.clamp(-T::one(), T::one()).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn euler_round_trip() {
        let r = euler_zyx(0.1f64, -0.4, 2.0);
        assert!(is_rotation(&r, 1e-12));
        let (a, b, c) = euler_zyx_angles(&r);
        assert_abs_diff_eq!(a, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(b, -0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(c, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn tolerances_per_type() {
        assert_eq!(<f64 as Real>::ortho_tol(), 1e-9);
        assert!(<f32 as Real>::ortho_tol() > 1e-5);
    }

    #[test]
    fn scaled_matrix_is_not_rotation() {
        let r = Mat3::<f64>::identity() * 2.0;
        assert!(!is_rotation(&r, 1e-6));
        assert!(is_rotation(&axis_angle(&Vec3::new(1.0, 2.0, 3.0), 0.7), 1e-12));
    }
}
