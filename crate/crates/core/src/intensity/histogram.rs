//! Joint intensity histograms and mutual information in bits.

use crate::scalar::Vec3;
use crate::transforms::{Deformable, Rigid};
use crate::volume::Volume;

use super::{BinAccumulation, RegistrationConfig, RegistrationError};

/// Maps world points of the fixed image into the moving image.
pub trait PointMap {
    fn map_point(&self, p: &Vec3<f64>) -> Option<Vec3<f64>>;
}

impl PointMap for Rigid<f64> {
    fn map_point(&self, p: &Vec3<f64>) -> Option<Vec3<f64>> {
        Some(self.apply(p))
    }
}

impl PointMap for Deformable<f64> {
    fn map_point(&self, p: &Vec3<f64>) -> Option<Vec3<f64>> {
        self.apply(p).ok()
    }
}

impl<F: Fn(&Vec3<f64>) -> Option<Vec3<f64>>> PointMap for F {
    fn map_point(&self, p: &Vec3<f64>) -> Option<Vec3<f64>> {
        self(p)
    }
}

/// Intensity → bin mapping. Bin centres sit at `min + k·(max − min)/(bins − 1)`,
/// so the extremes of the range land exactly on the first and last bins.
#[derive(Debug, Clone, Copy)]
pub struct Binner {
    min: f64,
    scale: f64,
    bins: usize,
}

impl Binner {
    pub fn new(range: (f64, f64), bins: usize) -> Self {
        let width = range.1 - range.0;
        let scale = if width > 0.0 { (bins - 1) as f64 / width } else { 0.0 };
        Self { min: range.0, scale, bins }
    }

    #[inline]
    fn position(&self, v: f64) -> f64 {
        ((v - self.min) * self.scale).clamp(0.0, (self.bins - 1) as f64)
    }

    #[inline]
    pub fn nearest(&self, v: f64) -> usize {
        (self.position(v) + 0.5).floor() as usize
    }

    /// Lower bin and the weight carried by the upper bin.
    #[inline]
    pub fn linear(&self, v: f64) -> (usize, f64) {
        let x = self.position(v);
        let lo = (x.floor() as usize).min(self.bins - 2);
        (lo, x - lo as f64)
    }
}

/// `bins × bins` joint histogram; row index is the fixed-image bin.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    pub bins: usize,
    pub counts: Vec<f64>,
    pub fixed_range: (f64, f64),
    pub moving_range: (f64, f64),
    /// Accepted samples (mapped inside the moving image).
    pub n_samples: usize,
    /// Samples skipped because they mapped outside the moving image.
    pub n_outside: usize,
}

impl JointHistogram {
    pub fn empty(bins: usize, fixed_range: (f64, f64), moving_range: (f64, f64)) -> Self {
        Self { bins, counts: vec![0.0; bins * bins], fixed_range, moving_range, n_samples: 0, n_outside: 0 }
    }

    #[inline]
    pub fn get(&self, f: usize, m: usize) -> f64 {
        self.counts[f * self.bins + m]
    }

    /// Adds one sample with the given accumulation rule.
    #[inline]
    pub fn add(&mut self, fixed_bin: usize, moving: f64, binner: &Binner, acc: BinAccumulation) {
        let row = fixed_bin * self.bins;
        match acc {
            BinAccumulation::Nearest => self.counts[row + binner.nearest(moving)] += 1.0,
            BinAccumulation::Linear => {
                let (lo, w) = binner.linear(moving);
                self.counts[row + lo] += 1.0 - w;
                self.counts[row + lo + 1] += w;
            }
        }
        self.n_samples += 1;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn transposed(&self) -> Self {
        let b = self.bins;
        let mut counts = vec![0.0; b * b];
        for f in 0..b {
            for m in 0..b {
                counts[m * b + f] = self.counts[f * b + m];
            }
        }
        Self { counts, fixed_range: self.moving_range, moving_range: self.fixed_range, ..self.clone() }
    }

    pub fn fixed_marginal(&self) -> Vec<f64> {
        (0..self.bins).map(|f| self.counts[f * self.bins..(f + 1) * self.bins].iter().sum()).collect()
    }

    pub fn moving_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.bins];
        for f in 0..self.bins {
            for (m, o) in out.iter_mut().enumerate() {
                *o += self.counts[f * self.bins + m];
            }
        }
        out
    }

    /// Mutual information in bits.
    pub fn mutual_information(&self) -> f64 {
        mutual_information_counts(&self.counts, self.bins)
    }
}

/// Shannon entropy (bits) of a count vector.
pub fn entropy_bits(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            p * p.log2()
        })
        .sum::<f64>()
}

/// `Σ p(f,m)·log2(p(f,m) / (p(f)·p(m)))` over nonzero cells.
pub fn mutual_information_counts(counts: &[f64], bins: usize) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut pf = vec![0.0; bins];
    let mut pm = vec![0.0; bins];
    for f in 0..bins {
        for m in 0..bins {
            let c = counts[f * bins + m];
            pf[f] += c;
            pm[m] += c;
        }
    }
    let mut mi = 0.0;
    for f in 0..bins {
        if pf[f] <= 0.0 {
            continue;
        }
        for m in 0..bins {
            let c = counts[f * bins + m];
            if c > 0.0 {
                // c·total / (pf·pm) is the ratio of joint to product-of-marginals
                mi += c * (c * total / (pf[f] * pm[m])).log2();
            }
        }
    }
    (mi / total).max(0.0)
}

/// Mutual information of a histogram.
pub fn mutual_information(h: &JointHistogram) -> f64 {
    h.mutual_information()
}

/// Fixed-image sample positions with their precomputed fixed bins.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<Vec3<f64>>,
    pub fixed_bins: Vec<u16>,
    pub fixed_range: (f64, f64),
}

impl SampleSet {
    /// Every `stride`-th voxel along each axis, in storage order, skipping
    /// `margin` voxels at each face (axes too short for the margin keep all voxels).
    pub fn from_grid(fixed: &Volume, stride: usize, margin: usize, bins: usize, fixed_range: (f64, f64)) -> Self {
        let stride = stride.max(1);
        let binner = Binner::new(fixed_range, bins);
        let d = fixed.dims();
        let span = |n: usize| if n > 2 * margin { margin..n - margin } else { 0..n };
        let mut points = Vec::new();
        let mut fixed_bins = Vec::new();
        for k in span(d[2]).step_by(stride) {
            for j in span(d[1]).step_by(stride) {
                for i in span(d[0]).step_by(stride) {
                    points.push(fixed.index_to_world(&Vec3::new(i as f64, j as f64, k as f64)));
                    fixed_bins.push(binner.nearest(fixed.value(i, j, k)) as u16);
                }
            }
        }
        Self { points, fixed_bins, fixed_range }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Accumulates the joint histogram of this sample set against `moving`.
    pub fn histogram(
        &self,
        moving: &Volume,
        moving_range: (f64, f64),
        map: &impl PointMap,
        bins: usize,
        acc: BinAccumulation,
    ) -> JointHistogram {
        let binner = Binner::new(moving_range, bins);
        let mut h = JointHistogram::empty(bins, self.fixed_range, moving_range);
        for (p, &fb) in self.points.iter().zip(&self.fixed_bins) {
            match map.map_point(p).and_then(|q| moving.sample(&q)) {
                Some(v) => h.add(fb as usize, v, &binner, acc),
                None => h.n_outside += 1,
            }
        }
        h
    }
}

/// Joint histogram of `fixed` against `moving` under `map` (fixed world → moving world).
pub fn joint_histogram(
    fixed: &Volume,
    moving: &Volume,
    map: &impl PointMap,
    cfg: &RegistrationConfig,
) -> Result<JointHistogram, RegistrationError> {
    cfg.validate()?;
    let samples = SampleSet::from_grid(fixed, cfg.sample_stride, 0, cfg.bins, fixed.min_max());
    let h = samples.histogram(moving, moving.min_max(), map, cfg.bins, cfg.accumulation);
    if h.n_samples == 0 {
        return Err(RegistrationError::EmptyOverlap);
    }
    Ok(h)
}
