//! Deformable MI refinement: gradient ascent on B-spline control
//! displacements with central-difference gradients and a fixed, decaying step.
//!
//! Each control point influences only the samples inside its 4×4×4 cell
//! support, so a perturbation is scored by patching a copy of the current
//! joint histogram instead of rebuilding it.

use std::thread;

use crate::scalar::Vec3;
use crate::transforms::{BSplineGrid, Rigid, Support};
use crate::volume::Volume;

use super::histogram::{mutual_information_counts, Binner, SampleSet};
use super::rigid::SAMPLE_MARGIN;
use super::{check_initial_overlap, overlap_ok, BinAccumulation, RegistrationConfig, RegistrationError, RegistrationReport};

/// Control cell size used when the config leaves it open, in fixed voxels.
const DEFAULT_GRID_VOXELS: f64 = 8.0;

struct State {
    disp: Vec<Vec3<f64>>,
    values: Vec<Option<f64>>,
    counts: Vec<f64>,
    accepted: usize,
    mi: f64,
}

struct Problem<'a> {
    moving: &'a Volume,
    fixed_bins: Vec<u16>,
    /// Rigidly mapped sample positions.
    base: Vec<Vec3<f64>>,
    supports: Vec<Option<Support<f64>>>,
    /// Per control point: (sample, weight) pairs within its support.
    influence: Vec<Vec<(u32, f64)>>,
    binner: Binner,
    bins: usize,
    acc: BinAccumulation,
    cfg: &'a RegistrationConfig,
}

impl Problem<'_> {
    fn add(&self, counts: &mut [f64], fixed_bin: u16, v: f64, sign: f64) {
        let row = fixed_bin as usize * self.bins;
        match self.acc {
            BinAccumulation::Nearest => counts[row + self.binner.nearest(v)] += sign,
            BinAccumulation::Linear => {
                let (lo, w) = self.binner.linear(v);
                counts[row + lo] += sign * (1.0 - w);
                counts[row + lo + 1] += sign * w;
            }
        }
    }

    fn score(&self, counts: &[f64], accepted: usize) -> f64 {
        if overlap_ok(accepted, self.base.len(), self.cfg) {
            mutual_information_counts(counts, self.bins)
        } else {
            f64::NEG_INFINITY
        }
    }

    fn state(&self, grid: &BSplineGrid<f64>) -> State {
        let mut counts = vec![0.0; self.bins * self.bins];
        let mut accepted = 0;
        let mut disp = Vec::with_capacity(self.base.len());
        let mut values = Vec::with_capacity(self.base.len());
        for (i, s) in self.supports.iter().enumerate() {
            let d = s.as_ref().map(|s| grid.displacement_at(s)).unwrap_or_else(Vec3::zeros);
            let v = s.and_then(|_| self.moving.sample(&(self.base[i] + d)));
            if let Some(v) = v {
                self.add(&mut counts, self.fixed_bins[i], v, 1.0);
                accepted += 1;
            }
            disp.push(d);
            values.push(v);
        }
        let mi = self.score(&counts, accepted);
        State { disp, values, counts, accepted, mi }
    }

    /// MI after displacing control point `c` by `delta`.
    fn perturbed(&self, st: &State, c: usize, delta: &Vec3<f64>) -> f64 {
        let mut counts = st.counts.clone();
        let mut accepted = st.accepted;
        for &(i, w) in &self.influence[c] {
            let i = i as usize;
            if let Some(v) = st.values[i] {
                self.add(&mut counts, self.fixed_bins[i], v, -1.0);
                accepted -= 1;
            }
            if let Some(v) = self.moving.sample(&(self.base[i] + st.disp[i] + delta * w)) {
                self.add(&mut counts, self.fixed_bins[i], v, 1.0);
                accepted += 1;
            }
        }
        self.score(&counts, accepted)
    }

    fn gradient_of(&self, st: &State, c: usize) -> Vec3<f64> {
        if self.influence[c].is_empty() {
            return Vec3::zeros();
        }
        let h = self.cfg.bspline_fd_step;
        let mut g = Vec3::zeros();
        for a in 0..3 {
            let mut e = Vec3::zeros();
            e[a] = h;
            let plus = self.perturbed(st, c, &e);
            let minus = self.perturbed(st, c, &-e);
            g[a] = if plus.is_finite() && minus.is_finite() { (plus - minus) / (2.0 * h) } else { 0.0 };
        }
        g
    }

    /// Gradient over all control points; chunks run on scoped threads and are
    /// concatenated in order, so the result does not depend on thread count.
    fn gradient(&self, st: &State, n_controls: usize) -> Vec<Vec3<f64>> {
        let threads = thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(16);
        let chunk = n_controls.div_ceil(threads).max(1);
        let mut out = vec![Vec3::zeros(); n_controls];
        thread::scope(|s| {
            for (ci, slot) in out.chunks_mut(chunk).enumerate() {
                s.spawn(move || {
                    for (k, g) in slot.iter_mut().enumerate() {
                        *g = self.gradient_of(st, ci * chunk + k);
                    }
                });
            }
        });
        out
    }
}

pub fn register_bspline_mi(
    fixed: &Volume,
    moving: &Volume,
    rigid_init: &Rigid<f64>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationReport, RegistrationError> {
    cfg.validate()?;
    rigid_init.validate()?;
    let samples = SampleSet::from_grid(fixed, cfg.bspline_sample_stride, SAMPLE_MARGIN, cfg.bins, fixed.min_max());
    let base: Vec<Vec3<f64>> = samples.points.iter().map(|p| rigid_init.apply(p)).collect();

    // the field is evaluated at rigidly mapped points, so cover their extent
    let mapped = fixed.corners().map(|c| rigid_init.apply(&c));
    let lo = mapped.iter().fold(Vec3::repeat(f64::INFINITY), |m, p| m.inf(p));
    let hi = mapped.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
    let spacing = match cfg.grid_spacing {
        Some(s) => Vec3::repeat(s),
        None => fixed.spacing() * DEFAULT_GRID_VOXELS,
    };
    let mut grid = BSplineGrid::covering(lo, hi, spacing)?;
    let supports: Vec<_> = base.iter().map(|q| grid.support(q)).collect();

    let mut influence = vec![Vec::new(); grid.len()];
    for (i, s) in supports.iter().enumerate() {
        let Some(s) = s else { continue };
        for c in 0..4 {
            for b in 0..4 {
                for a in 0..4 {
                    let idx = grid.index(s.base[0] + a, s.base[1] + b, s.base[2] + c);
                    influence[idx].push((i as u32, s.weight(a, b, c)));
                }
            }
        }
    }

    let problem = Problem {
        moving,
        fixed_bins: samples.fixed_bins,
        base,
        supports,
        influence,
        binner: Binner::new(moving.min_max(), cfg.bins),
        bins: cfg.bins,
        acc: cfg.bspline_accumulation,
        cfg,
    };

    let mut state = problem.state(&grid);
    check_initial_overlap(state.accepted, problem.base.len(), cfg)?;
    let initial_mi = state.mi;
    let mut trace = vec![initial_mi];
    let mut gradient: Option<Vec<Vec3<f64>>> = None;
    let mut step = cfg.bspline_step;
    let mut improved = false;

    for _ in 0..cfg.bspline_iterations {
        let g = gradient.get_or_insert_with(|| problem.gradient(&state, grid.len()));
        let gmax = g.iter().map(|v| v.amax()).fold(0.0, f64::max);
        if !(gmax > 0.0) {
            break;
        }
        let mut candidate = grid.clone();
        for (d, gi) in candidate.displacements.iter_mut().zip(g.iter()) {
            *d += gi * (step / gmax);
        }
        let next = problem.state(&candidate);
        if next.mi > state.mi {
            grid = candidate;
            state = next;
            gradient = None;
            improved = true;
        }
        trace.push(state.mi);
        step *= cfg.bspline_step_decay;
    }

    let iterations = trace.len() - 1;
    Ok(RegistrationReport {
        final_transform: *rigid_init,
        grid: Some(grid),
        initial_mi,
        final_mi: state.mi,
        iterations,
        converged: improved,
        mi_trace: trace,
    })
}
