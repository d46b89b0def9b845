//! Rigid MI search: coordinate-wise golden-section refinement of three ZYX
//! Euler angles about the fixed-image centre and three translations, coarse to
//! fine over a 2× pyramid.

use crate::scalar::{euler_zyx, euler_zyx_angles, Vec3};
use crate::transforms::Rigid;
use crate::volume::Volume;

use super::histogram::{JointHistogram, SampleSet};
use super::{check_initial_overlap, overlap_ok, RegistrationConfig, RegistrationError, RegistrationReport};

/// Fixed voxels this close to a face are not sampled, so that small moves do
/// not push boundary samples out of the moving image and bias the metric.
pub(super) const SAMPLE_MARGIN: usize = 1;

/// Smallest axis length that is still halved when building the pyramid.
const MIN_PYRAMID_DIM: usize = 16;

/// `[roll, pitch, yaw, tx, ty, tz]` with the rotation taken about `center`.
pub fn rigid_to_params(t: &Rigid<f64>, center: &Vec3<f64>) -> [f64; 6] {
    let (rx, ry, rz) = euler_zyx_angles(&t.rotation);
    let off = t.translation - center + t.rotation * center;
    [rx, ry, rz, off.x, off.y, off.z]
}

pub fn rigid_from_params(p: &[f64; 6], center: &Vec3<f64>) -> Rigid<f64> {
    Rigid::about_center(euler_zyx(p[0], p[1], p[2]), *center, Vec3::new(p[3], p[4], p[5]))
}

struct LevelMetric<'a> {
    samples: SampleSet,
    moving: &'a Volume,
    moving_range: (f64, f64),
    cfg: &'a RegistrationConfig,
}

impl<'a> LevelMetric<'a> {
    fn new(
        fixed: &Volume,
        moving: &'a Volume,
        stride: usize,
        ranges: ((f64, f64), (f64, f64)),
        cfg: &'a RegistrationConfig,
    ) -> Self {
        Self {
            samples: SampleSet::from_grid(fixed, stride, SAMPLE_MARGIN, cfg.bins, ranges.0),
            moving,
            moving_range: ranges.1,
            cfg,
        }
    }

    fn histogram(&self, t: &Rigid<f64>) -> JointHistogram {
        self.samples.histogram(self.moving, self.moving_range, t, self.cfg.bins, self.cfg.accumulation)
    }

    /// MI, or −∞ when the overlap rule rejects the pose.
    fn value(&self, t: &Rigid<f64>) -> f64 {
        let h = self.histogram(t);
        if overlap_ok(h.n_samples, self.samples.len(), self.cfg) {
            h.mutual_information()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Golden-section search for a maximum of `f` on `[a, b]`.
fn golden_max(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn pyramid(v: &Volume, levels: usize) -> Vec<Volume> {
    let mut out = vec![v.clone()];
    while out.len() < levels {
        let last = out.last().unwrap();
        if last.dims().iter().any(|&d| d < MIN_PYRAMID_DIM) {
            break;
        }
        let next = last.downsample2();
        out.push(next);
    }
    out
}

pub fn register_rigid_mi(
    fixed: &Volume,
    moving: &Volume,
    init: &Rigid<f64>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationReport, RegistrationError> {
    cfg.validate()?;
    init.validate()?;
    let ranges = (fixed.min_max(), moving.min_max());
    let center = fixed.center();

    let fine = LevelMetric::new(fixed, moving, cfg.sample_stride, ranges, cfg);
    let h0 = fine.histogram(init);
    check_initial_overlap(h0.n_samples, fine.samples.len(), cfg)?;
    let initial_mi = h0.mutual_information();

    let fixed_levels = pyramid(fixed, cfg.pyramid_levels);
    let moving_levels = pyramid(moving, cfg.pyramid_levels);
    let levels = fixed_levels.len().min(moving_levels.len());

    let init_params = rigid_to_params(init, &center);
    let mut params = init_params;
    let mut trace = vec![initial_mi];
    let mut iterations = 0;
    let mut current = initial_mi;
    let mut improved = false;

    for level in (0..levels).rev() {
        let coarse;
        let metric = if level == 0 {
            &fine
        } else {
            coarse = LevelMetric::new(&fixed_levels[level], &moving_levels[level], 1, ranges, cfg);
            &coarse
        };
        current = metric.value(&rigid_from_params(&params, &center));
        if level == 0 {
            // the coarse result only carries over if it is better at full resolution
            if current > initial_mi {
                improved = true;
                trace.push(current);
            } else {
                params = init_params;
                current = initial_mi;
                improved = false;
            }
        }
        let scale = 0.5f64.powi((levels - 1 - level) as i32);
        for sweep in 0..cfg.sweeps_per_level {
            let shrink = scale * 0.5f64.powi(sweep as i32);
            let rot_r = cfg.rotation_radius_deg.to_radians() * shrink;
            let trans_r = cfg.translation_radius * shrink;
            for j in 0..6 {
                let r = if j < 3 { rot_r } else { trans_r };
                let eval = |x: f64| {
                    let mut p = params;
                    p[j] = x;
                    metric.value(&rigid_from_params(&p, &center))
                };
                let (x, fx) = golden_max(eval, params[j] - r, params[j] + r, 2.0 * r * cfg.golden_tolerance);
                if fx > current {
                    params[j] = x;
                    current = fx;
                    if level == 0 {
                        improved = true;
                    }
                }
            }
            iterations += 1;
            if level == 0 {
                trace.push(current);
            }
        }
    }

    if improved {
        Ok(RegistrationReport {
            final_transform: rigid_from_params(&params, &center),
            grid: None,
            initial_mi,
            final_mi: current,
            iterations,
            converged: true,
            mi_trace: trace,
        })
    } else {
        Ok(RegistrationReport {
            final_transform: *init,
            grid: None,
            initial_mi,
            final_mi: initial_mi,
            iterations,
            converged: false,
            mi_trace: vec![initial_mi; trace.len()],
        })
    }
}
