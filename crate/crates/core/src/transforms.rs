//! Rigid and cubic B-spline free-form deformation transforms.
//!
//! A [`Rigid`] maps points as `R·p + t`. A [`BSplineGrid`] stores control-point
//! displacements on a regular lattice and interpolates them with the cubic
//! B-spline basis. [`Deformable`] chains the two: rigid first, then the
//! displacement field evaluated at the rigidly mapped point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{axis_angle, is_rotation, Mat3, Real, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("rotation is not orthonormal with det +1")]
    NotARotation,
    #[error("B-spline parameter {0} outside [0, 1)")]
    BasisDomain(f64),
    #[error("point outside B-spline grid support")]
    OutsideSupport,
    #[error("invalid B-spline grid: {0}")]
    InvalidGrid(String),
    #[error("expected {expected} numbers, got {got}")]
    WrongLength { expected: usize, got: usize },
}

/// Rigid transform `p ↦ R·p + t` (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid<T: Real> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Default for Rigid<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rigid<T> {
    /// Validating constructor.
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self, TransformError> {
        let t = Self { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(translation: Vec3<T>) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis` through the origin, then translation.
    pub fn from_axis_angle(axis: Vec3<T>, angle: T, translation: Vec3<T>) -> Self {
        Self {
            rotation: axis_angle(&axis, angle),
            translation,
        }
    }

    /// Rotation about `center` followed by `offset`: `p ↦ R(p − c) + c + offset`.
    pub fn about_center(rotation: Mat3<T>, center: Vec3<T>, offset: Vec3<T>) -> Self {
        Self {
            rotation,
            translation: center - rotation * center + offset,
        }
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        if is_rotation(&self.rotation, T::ortho_tol()) && self.translation.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TransformError::NotARotation)
        }
    }

    pub fn apply(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation * p + self.translation
    }

    /// Rotates a direction without translating it.
    pub fn apply_vector(&self, v: &Vec3<T>) -> Vec3<T> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major rotation followed by translation: 12 numbers.
    pub fn to_array(&self) -> [T; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
            t[0], t[1], t[2],
        ]
    }

    /// Inverse of [`Rigid::to_array`]; validates the rotation.
    pub fn from_slice(v: &[T]) -> Result<Self, TransformError> {
        if v.len() != 12 {
            return Err(TransformError::WrongLength { expected: 12, got: v.len() });
        }
        let rotation = Mat3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
        Self::new(rotation, Vec3::new(v[9], v[10], v[11]))
    }

    pub fn cast<U: Real>(&self) -> Rigid<U> {
        Rigid {
            rotation: self.rotation.map(|x| U::lit(x.as_f64())),
            translation: self.translation.map(|x| U::lit(x.as_f64())),
        }
    }
}

impl<T: Real> Serialize for Rigid<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let arr: Vec<f64> = self.to_array().iter().map(|x| x.as_f64()).collect();
        arr.serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for Rigid<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        let v: Vec<T> = v.into_iter().map(T::lit).collect();
        Rigid::from_slice(&v).map_err(serde::de::Error::custom)
    }
}

/// The four cubic B-spline blending weights at `u ∈ [0, 1)`.
pub fn bspline_basis<T: Real>(u: T) -> Result<[T; 4], TransformError> {
    if !(u >= T::zero() && u < T::one()) {
        return Err(TransformError::BasisDomain(u.as_f64()));
    }
    Ok(basis_unchecked(u))
}

#[inline]
fn basis_unchecked<T: Real>(u: T) -> [T; 4] {
    let six = T::lit(6.0);
    let u2 = u * u;
    let u3 = u2 * u;
    let om = T::one() - u;
    [
        om * om * om / six,
        (T::lit(3.0) * u3 - T::lit(6.0) * u2 + T::lit(4.0)) / six,
        (T::lit(-3.0) * u3 + T::lit(3.0) * u2 + T::lit(3.0) * u + T::one()) / six,
        u3 / six,
    ]
}

/// Support of one point: lowest control index per axis and the 4 weights per axis.
#[derive(Debug, Clone, Copy)]
pub struct Support<T> {
    pub base: [usize; 3],
    pub weights: [[T; 4]; 3],
}

impl<T: Real> Support<T> {
    /// Tensor-product weight of the control point at `base + (a, b, c)`.
    #[inline]
    pub fn weight(&self, a: usize, b: usize, c: usize) -> T {
        self.weights[0][a] * self.weights[1][b] * self.weights[2][c]
    }
}

/// Cubic B-spline control lattice of displacement vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BSplineGrid<T: Real> {
    pub grid_dims: [usize; 3],
    #[serde(with = "crate::serde_vec3")]
    pub grid_origin: Vec3<T>,
    #[serde(with = "crate::serde_vec3")]
    pub grid_spacing: Vec3<T>,
    #[serde(with = "crate::serde_vec3::list")]
    pub displacements: Vec<Vec3<T>>,
}

impl<T: Real> BSplineGrid<T> {
    pub fn new(
        grid_dims: [usize; 3],
        grid_origin: Vec3<T>,
        grid_spacing: Vec3<T>,
        displacements: Vec<Vec3<T>>,
    ) -> Result<Self, TransformError> {
        let g = Self { grid_dims, grid_origin, grid_spacing, displacements };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        if self.grid_dims.iter().any(|&d| d < 4) {
            return Err(TransformError::InvalidGrid(format!("grid dims {:?} must be >= 4", self.grid_dims)));
        }
        if self.grid_spacing.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(TransformError::InvalidGrid("grid spacing must be positive".into()));
        }
        let n: usize = self.grid_dims.iter().product();
        if self.displacements.len() != n {
            return Err(TransformError::InvalidGrid(format!(
                "{} displacements for {} control points",
                self.displacements.len(),
                n
            )));
        }
        Ok(())
    }

    /// Zero-displacement grid whose support covers the axis-aligned box
    /// `[lo, hi]` with one control point of margin beyond each face.
    pub fn covering(lo: Vec3<T>, hi: Vec3<T>, spacing: Vec3<T>) -> Result<Self, TransformError> {
        let mut dims = [0usize; 3];
        for a in 0..3 {
            if !(spacing[a] > T::zero()) || hi[a] < lo[a] {
                return Err(TransformError::InvalidGrid("empty domain or bad spacing".into()));
            }
            let cells = ((hi[a] - lo[a]) / spacing[a]).floor().as_f64() as usize;
            dims[a] = cells + 4;
        }
        let origin = lo - spacing;
        let n = dims.iter().product();
        Self::new(dims, origin, spacing, vec![Vec3::zeros(); n])
    }

    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid_dims[0] * (j + self.grid_dims[1] * k)
    }

    /// Control point position (mm).
    pub fn control_point(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        self.grid_origin
            + Vec3::new(
                self.grid_spacing[0] * T::lit(i as f64),
                self.grid_spacing[1] * T::lit(j as f64),
                self.grid_spacing[2] * T::lit(k as f64),
            )
    }

    /// Locates the 4×4×4 neighbourhood of `p`, or `None` outside the support.
    pub fn support(&self, p: &Vec3<T>) -> Option<Support<T>> {
        let mut base = [0usize; 3];
        let mut weights = [[T::zero(); 4]; 3];
        for a in 0..3 {
            let u = (p[a] - self.grid_origin[a]) / self.grid_spacing[a];
            if !u.is_finite() {
                return None;
            }
            let cell = u.floor();
            let frac = u - cell;
            let cell = cell.as_f64();
            if cell < 1.0 || cell + 2.0 > (self.grid_dims[a] - 1) as f64 {
                return None;
            }
            base[a] = cell as usize - 1;
            weights[a] = basis_unchecked(frac);
        }
        Some(Support { base, weights })
    }

    /// Displacement at `p` as the tensor-product sum over its 64 control points.
    pub fn displacement(&self, p: &Vec3<T>) -> Result<Vec3<T>, TransformError> {
        let s = self.support(p).ok_or(TransformError::OutsideSupport)?;
        Ok(self.displacement_at(&s))
    }

    pub fn displacement_at(&self, s: &Support<T>) -> Vec3<T> {
        let mut d = Vec3::zeros();
        for c in 0..4 {
            for b in 0..4 {
                let wbc = s.weights[1][b] * s.weights[2][c];
                let row = self.index(s.base[0], s.base[1] + b, s.base[2] + c);
                for a in 0..4 {
                    d += self.displacements[row + a] * (s.weights[0][a] * wbc);
                }
            }
        }
        d
    }

    pub fn max_displacement(&self) -> T {
        self.displacements
            .iter()
            .map(|d| d.norm())
            .fold(T::zero(), |m, x| if x > m { x } else { m })
    }
}

/// Rigid pre-alignment followed by a B-spline displacement field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Deformable<T: Real> {
    pub rigid: Rigid<T>,
    pub grid: BSplineGrid<T>,
}

impl<T: Real> Deformable<T> {
    pub fn apply(&self, p: &Vec3<T>) -> Result<Vec3<T>, TransformError> {
        deformable_apply(&self.rigid, &self.grid, p)
    }
}

/// `rigid(p) + grid.displacement(rigid(p))`.
pub fn deformable_apply<T: Real>(
    rigid: &Rigid<T>,
    grid: &BSplineGrid<T>,
    p: &Vec3<T>,
) -> Result<Vec3<T>, TransformError> {
    let q = rigid.apply(p);
    Ok(q + grid.displacement(&q)?)
}
