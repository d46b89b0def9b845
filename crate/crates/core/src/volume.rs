//! Regular 3D scalar volumes: geometry, trilinear sampling, slicing and
//! PET-over-CT fusion.
//!
//! Voxels are node-centred: `origin` is the world position of the centre of
//! voxel `(0, 0, 0)` and index `i` maps to `origin + D·(spacing ∘ i)`.
//! Data is stored x-fastest. Volumes are immutable once built.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{Mat3, Vec3};

/// Continuous indices within this distance of the grid faces still sample.
const EDGE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("dimension mismatch: header declares {expected} bytes of voxel data, payload has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("slice index {index} out of range for axis of length {len}")]
    SliceOutOfRange { index: usize, len: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Ct,
    Pet,
    InterventionalCt,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "CT",
            Modality::Pet => "PET",
            Modality::InterventionalCt => "INTERVENTIONAL_CT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "CT" => Some(Modality::Ct),
            "PET" => Some(Modality::Pet),
            "INTERVENTIONAL_CT" => Some(Modality::InterventionalCt),
            _ => None,
        }
    }
}

/// On-disk voxel type. Values held in memory are always `f64` but must be
/// exactly representable in this type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalarType {
    Int16,
    Float32,
}

impl ScalarType {
    pub fn byte_size(self) -> usize {
        match self {
            ScalarType::Int16 => 2,
            ScalarType::Float32 => 4,
        }
    }

    /// Rounds/casts `v` to the nearest representable value.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            ScalarType::Int16 => v.round().clamp(i16::MIN as f64, i16::MAX as f64),
            ScalarType::Float32 => v as f32 as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowLevel {
    window: f64,
    pub level: f64,
}

impl WindowLevel {
    pub fn new(window: f64, level: f64) -> Result<Self, VolumeError> {
        if !(window > 0.0) || !level.is_finite() {
            return Err(VolumeError::Invalid(format!("window must be > 0, got {window}")));
        }
        Ok(Self { window, level })
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    /// `(v − (level − window/2)) / window` clamped to `[0, 1]`.
    pub fn normalize(&self, v: f64) -> f64 {
        ((v - (self.level - self.window / 2.0)) / self.window).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SliceAxis {
    Axial,
    Coronal,
    Sagittal,
}

impl SliceAxis {
    /// Index axis held fixed by this slice orientation.
    pub fn normal_axis(self) -> usize {
        match self {
            SliceAxis::Axial => 2,
            SliceAxis::Coronal => 1,
            SliceAxis::Sagittal => 0,
        }
    }

    /// `(column axis, row axis)` of the slice image.
    pub fn in_plane_axes(self) -> (usize, usize) {
        match self {
            SliceAxis::Axial => (0, 1),
            SliceAxis::Coronal => (0, 2),
            SliceAxis::Sagittal => (1, 2),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "axial" => Some(SliceAxis::Axial),
            "coronal" => Some(SliceAxis::Coronal),
            "sagittal" => Some(SliceAxis::Sagittal),
            _ => None,
        }
    }
}

/// Row-major 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<P> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<P>,
}

impl<P: Copy> Plane<P> {
    pub fn get(&self, col: usize, row: usize) -> P {
        self.data[row * self.width + col]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    Gray,
    Hot,
}

impl Colormap {
    pub fn map(self, v: f64) -> [f64; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Gray => [v, v, v],
            Colormap::Hot => [
                (3.0 * v).clamp(0.0, 1.0),
                (3.0 * v - 1.0).clamp(0.0, 1.0),
                (3.0 * v - 2.0).clamp(0.0, 1.0),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Vec3<f64>,
    origin: Vec3<f64>,
    direction: Mat3<f64>,
    data: Vec<f64>,
    modality: Modality,
    scalar_type: ScalarType,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: Vec3<f64>,
        origin: Vec3<f64>,
        direction: Mat3<f64>,
        data: Vec<f64>,
        modality: Modality,
        scalar_type: ScalarType,
    ) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::Invalid(format!("dims {dims:?} must be positive")));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| VolumeError::Invalid("dims overflow".into()))?;
        if data.len() != n {
            return Err(VolumeError::Invalid(format!("{} values for {} voxels", data.len(), n)));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("origin must be finite".into()));
        }
        let gram = direction.transpose() * direction;
        if !(gram - Mat3::identity()).iter().all(|v| v.abs() <= 1e-9) || !direction.iter().all(|v| v.is_finite()) {
            return Err(VolumeError::Invalid("direction must be orthonormal".into()));
        }
        if let Some(v) = data.iter().find(|&&v| scalar_type.quantize(v) != v) {
            return Err(VolumeError::Invalid(format!("value {v} not representable as {scalar_type:?}")));
        }
        Ok(Self { dims, spacing, origin, direction, data, modality, scalar_type })
    }

    /// Builds a volume from a generator `f(world point)`, quantizing to `scalar_type`.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: Vec3<f64>,
        origin: Vec3<f64>,
        direction: Mat3<f64>,
        modality: Modality,
        scalar_type: ScalarType,
        mut f: impl FnMut(Vec3<f64>) -> f64,
    ) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = origin + direction * spacing.component_mul(&Vec3::new(i as f64, j as f64, k as f64));
                    data.push(scalar_type.quantize(f(p)));
                }
            }
        }
        Self::new(dims, spacing, origin, direction, data, modality, scalar_type)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> Vec3<f64> {
        self.spacing
    }

    pub fn origin(&self) -> Vec3<f64> {
        self.origin
    }

    pub fn direction(&self) -> Mat3<f64> {
        self.direction
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn scalar_type(&self) -> ScalarType {
        self.scalar_type
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.linear_index(i, j, k)]
    }

    pub fn index_to_world(&self, idx: &Vec3<f64>) -> Vec3<f64> {
        self.origin + self.direction * self.spacing.component_mul(idx)
    }

    /// Continuous index of a world point; may lie outside the grid.
    pub fn world_to_index(&self, p: &Vec3<f64>) -> Vec3<f64> {
        (self.direction.transpose() * (p - self.origin)).component_div(&self.spacing)
    }

    /// World position of the voxel-grid centre.
    pub fn center(&self) -> Vec3<f64> {
        let half = Vec3::new(
            (self.dims[0] - 1) as f64 / 2.0,
            (self.dims[1] - 1) as f64 / 2.0,
            (self.dims[2] - 1) as f64 / 2.0,
        );
        self.index_to_world(&half)
    }

    /// World positions of the eight corner voxel centres.
    pub fn corners(&self) -> [Vec3<f64>; 8] {
        let hi = [(self.dims[0] - 1) as f64, (self.dims[1] - 1) as f64, (self.dims[2] - 1) as f64];
        let mut out = [Vec3::zeros(); 8];
        for (n, c) in out.iter_mut().enumerate() {
            let idx = Vec3::new(
                if n & 1 != 0 { hi[0] } else { 0.0 },
                if n & 2 != 0 { hi[1] } else { 0.0 },
                if n & 4 != 0 { hi[2] } else { 0.0 },
            );
            *c = self.index_to_world(&idx);
        }
        out
    }

    /// Axis-aligned world bounding box of the voxel centres.
    pub fn world_bounds(&self) -> (Vec3<f64>, Vec3<f64>) {
        let corners = self.corners();
        let mut lo = corners[0];
        let mut hi = corners[0];
        for c in &corners[1..] {
            lo = lo.inf(c);
            hi = hi.sup(c);
        }
        (lo, hi)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear interpolation at a world point; `None` outside the grid.
    pub fn sample(&self, p: &Vec3<f64>) -> Option<f64> {
        self.sample_index(&self.world_to_index(p))
    }

    /// Trilinear interpolation at a continuous index; `None` outside the grid.
    pub fn sample_index(&self, idx: &Vec3<f64>) -> Option<f64> {
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let x = idx[a];
            let hi = (n - 1) as f64;
            if !(x >= -EDGE_TOL && x <= hi + EDGE_TOL) {
                return None;
            }
            let x = x.clamp(0.0, hi);
            if n == 1 {
                base[a] = 0;
                frac[a] = 0.0;
                continue;
            }
            let b = (x.floor() as usize).min(n - 2);
            base[a] = b;
            frac[a] = x - b as f64;
        }
        let sx = 1;
        let sy = self.dims[0];
        let sz = self.dims[0] * self.dims[1];
        let o = self.linear_index(base[0], base[1], base[2]);
        let step = |a: usize, s: usize| if self.dims[a] > 1 { s } else { 0 };
        let (dx, dy, dz) = (step(0, sx), step(1, sy), step(2, sz));
        let d = &self.data;
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let c00 = d[o] * (1.0 - fx) + d[o + dx] * fx;
        let c10 = d[o + dy] * (1.0 - fx) + d[o + dy + dx] * fx;
        let c01 = d[o + dz] * (1.0 - fx) + d[o + dz + dx] * fx;
        let c11 = d[o + dz + dy] * (1.0 - fx) + d[o + dz + dy + dx] * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        Some(c0 * (1.0 - fz) + c1 * fz)
    }

    /// Index of the maximum voxel (first in storage order on ties).
    pub fn argmax(&self) -> [usize; 3] {
        let (mut best, mut bi) = (f64::NEG_INFINITY, 0);
        for (n, &v) in self.data.iter().enumerate() {
            if v > best {
                best = v;
                bi = n;
            }
        }
        let i = bi % self.dims[0];
        let j = (bi / self.dims[0]) % self.dims[1];
        let k = bi / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Halves the resolution by averaging 2×2×2 blocks (axes of length 1 are kept).
    pub fn downsample2(&self) -> Volume {
        let nd = [
            (self.dims[0] / 2).max(1),
            (self.dims[1] / 2).max(1),
            (self.dims[2] / 2).max(1),
        ];
        let factor = Vec3::new(
            if self.dims[0] >= 2 { 2.0 } else { 1.0 },
            if self.dims[1] >= 2 { 2.0 } else { 1.0 },
            if self.dims[2] >= 2 { 2.0 } else { 1.0 },
        );
        let mut data = Vec::with_capacity(nd[0] * nd[1] * nd[2]);
        for k in 0..nd[2] {
            for j in 0..nd[1] {
                for i in 0..nd[0] {
                    let mut sum = 0.0;
                    let mut n = 0.0;
                    for c in 0..factor[2] as usize {
                        for b in 0..factor[1] as usize {
                            for a in 0..factor[0] as usize {
                                sum += self.value(
                                    i * factor[0] as usize + a,
                                    j * factor[1] as usize + b,
                                    k * factor[2] as usize + c,
                                );
                                n += 1.0;
                            }
                        }
                    }
                    data.push(ScalarType::Float32.quantize(sum / n));
                }
            }
        }
        let shift = (factor - Vec3::repeat(1.0)) / 2.0;
        Volume {
            dims: nd,
            spacing: self.spacing.component_mul(&factor),
            origin: self.index_to_world(&shift),
            direction: self.direction,
            data,
            modality: self.modality,
            // averages are no longer integral
            scalar_type: ScalarType::Float32,
        }
    }

    /// Window/level-normalized slice of this volume.
    pub fn extract_slice(&self, axis: SliceAxis, index: usize, wl: WindowLevel) -> Result<Plane<f64>, VolumeError> {
        let n = axis.normal_axis();
        if index >= self.dims[n] {
            return Err(VolumeError::SliceOutOfRange { index, len: self.dims[n] });
        }
        let (ca, ra) = axis.in_plane_axes();
        let (w, h) = (self.dims[ca], self.dims[ra]);
        let mut data = Vec::with_capacity(w * h);
        let mut ijk = [0usize; 3];
        ijk[n] = index;
        for r in 0..h {
            for c in 0..w {
                ijk[ca] = c;
                ijk[ra] = r;
                data.push(wl.normalize(self.value(ijk[0], ijk[1], ijk[2])));
            }
        }
        Ok(Plane { width: w, height: h, data })
    }

    /// Samples `source` on the pixel grid of this volume's slice, mapping each
    /// pixel's world point through `map` (this frame → source frame) first.
    /// Pixels that map outside `source` read as 0.
    pub fn resample_slice(
        &self,
        axis: SliceAxis,
        index: usize,
        source: &Volume,
        map: impl Fn(&Vec3<f64>) -> Option<Vec3<f64>>,
        wl: WindowLevel,
    ) -> Result<Plane<f64>, VolumeError> {
        let n = axis.normal_axis();
        if index >= self.dims[n] {
            return Err(VolumeError::SliceOutOfRange { index, len: self.dims[n] });
        }
        let (ca, ra) = axis.in_plane_axes();
        let (w, h) = (self.dims[ca], self.dims[ra]);
        let mut data = Vec::with_capacity(w * h);
        let mut ijk = Vec3::zeros();
        ijk[n] = index as f64;
        for r in 0..h {
            for c in 0..w {
                ijk[ca] = c as f64;
                ijk[ra] = r as f64;
                let p = self.index_to_world(&ijk);
                let v = map(&p).and_then(|q| source.sample(&q));
                data.push(v.map(|v| wl.normalize(v)).unwrap_or(0.0));
            }
        }
        Ok(Plane { width: w, height: h, data })
    }
}

/// Per-pixel `(1 − opacity)·gray(base) + opacity·colormap(overlay)`.
pub fn blend_overlay(
    base: &Plane<f64>,
    overlay: &Plane<f64>,
    opacity: f64,
    colormap: Colormap,
) -> Result<Plane<[f64; 3]>, VolumeError> {
    if base.shape() != overlay.shape() {
        return Err(VolumeError::ShapeMismatch(base.shape(), overlay.shape()));
    }
    if !(0.0..=1.0).contains(&opacity) {
        return Err(VolumeError::Invalid(format!("opacity {opacity} outside [0, 1]")));
    }
    let data = base
        .data
        .iter()
        .zip(&overlay.data)
        .map(|(&b, &o)| {
            let g = Colormap::Gray.map(b);
            let c = colormap.map(o);
            [
                (1.0 - opacity) * g[0] + opacity * c[0],
                (1.0 - opacity) * g[1] + opacity * c[1],
                (1.0 - opacity) * g[2] + opacity * c[2],
            ]
        })
        .collect();
    Ok(Plane { width: base.width, height: base.height, data })
}
