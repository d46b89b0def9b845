//! Scripted end-to-end procedure against the phantom simulator: load,
//! register, connect, calibrate, touch fiducials, plan to the PET hot spot
//! and insert the needle under guidance, then score against ground truth.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use petnav_core::nrrd::save_volume;
use petnav_core::phantom::{
    generate_phantom, pose_for_tip, stream_needle_poses, GroundTruth, PhantomConfig, Trajectory, TrajectoryState,
};
use petnav_core::pivot::PoseSample;
use petnav_core::planning::BiopsyPlan;
use petnav_core::volume::Volume;
use petnav_core::Vec3;
use petnav_igtl::TrackerServer;

use crate::navigator::{matrix_from_pose, phantom_paths, Navigator};
use crate::session::{Calibration, RegistrationMode, SessionConfig};
use crate::steps::{StepStatus, WorkflowStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Poses handed to the session in process, at full f64 precision.
    Direct,
    /// Poses sent over TCP as TRANSFORM messages (f32 on the wire).
    Tcp,
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub phantom: PhantomConfig,
    pub transport: Transport,
    pub mode: RegistrationMode,
    pub work_dir: PathBuf,
    /// Largest needle advance per guidance tick (mm).
    pub insertion_step: f64,
    /// Guidance ticks averaged per final positioning round.
    pub hold_ticks: usize,
    pub hold_rounds: usize,
    pub check_staleness: bool,
}

impl DemoConfig {
    pub fn new(phantom: PhantomConfig, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            phantom,
            transport: Transport::Direct,
            mode: RegistrationMode::Rigid,
            work_dir: work_dir.into(),
            insertion_step: 2.0,
            hold_ticks: 20,
            hold_rounds: 3,
            check_staleness: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoReport {
    /// Largest per-axis registration error over the volume corners, in interventional voxels.
    pub registration_error_voxels: f64,
    pub pivot_error: f64,
    pub fiducial_rmse: f64,
    /// Planned target versus the true lesion centre (mm).
    pub target_error: f64,
    pub plan: BiopsyPlan<f64>,
    pub final_tip: [f64; 3],
    /// True tip to true lesion centre at the end of the insertion (mm).
    pub tre: f64,
    /// Depth readout at each advance step, then at the final position.
    pub depth_trace: Vec<f64>,
    pub depth_monotone: bool,
    /// Whether guidance went invalid after the stream stopped (when checked).
    pub stale_flagged: Option<bool>,
    pub elapsed_seconds: f64,
}

/// Intensity-weighted centroid of voxels at or above half the maximum.
pub fn hot_spot_centroid(pet: &Volume) -> Vec3<f64> {
    let (_, max) = pet.min_max();
    let [nx, ny, nz] = pet.dims();
    let mut sum = Vec3::zeros();
    let mut w = 0.0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let v = pet.value(i, j, k);
                if v >= 0.5 * max {
                    sum += pet.index_to_world(&Vec3::new(i as f64, j as f64, k as f64)) * v;
                    w += v;
                }
            }
        }
    }
    sum / w
}

/// Named trajectories for the simulator, in interventional-CT coordinates.
pub fn builtin_trajectory(name: &str, cfg: &PhantomConfig) -> Option<Trajectory> {
    let truth = GroundTruth::from_config(cfg);
    let lesion = truth.lesion_image;
    let outward = outward_from(&cfg.interventional_offset.apply(&Vec3::zeros()), &lesion);
    match name {
        "pivot" => Some(Trajectory::Pivot { pivot: [0.0, 0.0, 120.0], axis: [0.0, 0.0, -1.0], max_tilt_deg: 25.0, duration: 10.0 }),
        "insertion" => Some(Trajectory::Linear {
            entry: (lesion + outward * 60.0).into(),
            target: lesion.into(),
            duration: 10.0,
        }),
        "static" => Some(Trajectory::Static {
            tip: (lesion + outward * 80.0).into(),
            direction: (-outward).into(),
            duration: 10.0,
        }),
        _ => None,
    }
}

fn outward_from(center: &Vec3<f64>, p: &Vec3<f64>) -> Vec3<f64> {
    let d = p - center;
    if d.norm() > 1e-6 {
        d.normalize()
    } else {
        Vec3::x()
    }
}

/// The simulated clinician's hand: true needle placements turned into noisy sensor poses.
struct Hand {
    truth: GroundTruth,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
}

impl Hand {
    fn pose(&mut self, tip: Vec3<f64>, direction: Vec3<f64>, t: f64) -> PoseSample<f64> {
        let mut p = pose_for_tip(&self.truth, &TrajectoryState { tip, direction, roll: 0.0 }, t);
        if let Some(n) = &self.noise {
            p.position += Vec3::from_fn(|_, _| n.sample(&mut self.rng));
        }
        p
    }
}

enum Feed {
    Direct,
    Tcp(TrackerServer),
}

impl Feed {
    /// Delivers `pose` and returns once the session has it.
    fn send(&self, nav: &Navigator, pose: PoseSample<f64>) -> anyhow::Result<()> {
        match self {
            Feed::Direct => nav.inject_pose(pose),
            Feed::Tcp(server) => {
                let slot = nav.slot();
                let before = slot.latest().map(|l| l.seq);
                server.send_transform("NeedleTip", pose.timestamp, &matrix_from_pose(&pose))?;
                let deadline = Instant::now() + Duration::from_secs(5);
                while slot.latest().map(|l| l.seq) == before {
                    if Instant::now() > deadline {
                        bail!("pose not received over TCP within 5 s");
                    }
                    std::thread::sleep(Duration::from_micros(200));
                }
            }
        }
        Ok(())
    }
}

pub fn write_phantom(cfg: &PhantomConfig, dir: &Path) -> anyhow::Result<GroundTruth> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ph = generate_phantom(cfg)?;
    let [ct, pet, ict] = phantom_paths(dir);
    save_volume(&ph.comp_ct, ct)?;
    save_volume(&ph.comp_pet, pet)?;
    save_volume(&ph.interventional_ct, ict)?;
    std::fs::write(dir.join("truth.txt"), ph.truth.to_text())?;
    Ok(ph.truth)
}

pub fn run_demo(cfg: &DemoConfig) -> anyhow::Result<DemoReport> {
    let started = Instant::now();
    let truth = write_phantom(&cfg.phantom, &cfg.work_dir)?;
    let mut nav = Navigator::new(SessionConfig::default());

    // 1-2: data and image registration
    let [ct, pet, ict] = phantom_paths(&cfg.work_dir);
    nav.set_volumes(&ct, &pet, &ict)?;
    nav.run_registration(cfg.mode)?;
    let reg = nav.session().registration.clone().ok_or_else(|| anyhow!("registration missing"))?;
    let vols = nav.volumes().ok_or_else(|| anyhow!("volumes missing"))?.clone();
    let voxel = vols.interventional.spacing();
    let mut probes = vols.comp_ct.corners().to_vec();
    probes.push(vols.comp_ct.center());
    let registration_error_voxels = probes
        .iter()
        .map(|c| {
            let e = (reg.map_to_interventional(c) - truth.interventional_offset.apply(c)).abs();
            (0..3).map(|a| e[a] / voxel[a]).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);

    // 3: tracking
    let feed = match cfg.transport {
        Transport::Direct => {
            nav.connect_local()?;
            Feed::Direct
        }
        Transport::Tcp => {
            let server = TrackerServer::bind("127.0.0.1:0", 256)?;
            nav.connect_tracking("127.0.0.1", server.local_addr().port())?;
            let deadline = Instant::now() + Duration::from_secs(10);
            while server.client_count() == 0 {
                if Instant::now() > deadline {
                    bail!("tracker client did not connect");
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Feed::Tcp(server)
        }
    };
    let sigma = cfg.phantom.pose_noise_sigma;
    let mut hand = Hand {
        truth: truth.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.phantom.seed.wrapping_add(1)),
        noise: (sigma > 0.0).then(|| Normal::new(0.0, sigma)).transpose()?,
    };
    let body_center = vols.interventional.center();
    let home = truth.lesion_image + Vec3::new(0.0, 0.0, 150.0);
    feed.send(&nav, hand.pose(home, -Vec3::z(), nav.now()))?;
    nav.sync();
    if nav.session().steps.get(WorkflowStep::Tracking) != StepStatus::Complete {
        bail!("tracking did not complete after the first pose");
    }

    // 4: pivot calibration
    nav.set_capture(true);
    let pivot = builtin_trajectory("pivot", &cfg.phantom).expect("builtin");
    for p in stream_needle_poses(&cfg.phantom, &pivot, nav.now()) {
        feed.send(&nav, p)?;
    }
    nav.run_calibration()?;
    let pivot_error = match &nav.session().calibration {
        Some(Calibration::Solved { result }) => (result.tip_offset - truth.tip_offset).norm(),
        _ => bail!("calibration missing"),
    };

    // 5: fiducial touches, clicked at their image positions
    for (n, f) in truth.fiducials_image.iter().enumerate() {
        let inward = -outward_from(&body_center, f);
        feed.send(&nav, hand.pose(*f, inward, nav.now()))?;
        let now = nav.now();
        nav.record_fiducial(*f, Some(format!("F{}", n + 1)), now)?;
    }
    let fiducial_rmse =
        nav.session().patient_registration.as_ref().map(|r| r.rmse).ok_or_else(|| anyhow!("patient registration missing"))?;

    // 6: plan from the skin to the PET hot spot carried into the interventional frame
    let target = reg.map_to_interventional(&hot_spot_centroid(&vols.comp_pet));
    let entry = target + outward_from(&body_center, &target) * 60.0;
    nav.set_plan(entry, target)?;
    let plan = nav.session().plan.clone().expect("plan just set");

    // 7: insertion steered by the guidance display
    let mut tip = plan.entry;
    let mut depth_trace = Vec::new();
    for _ in 0..1000 {
        feed.send(&nav, hand.pose(tip, plan.direction, nav.now()))?;
        let now = nav.now();
        let g = nav.guidance_tick(now)?;
        depth_trace.push(g.depth_remaining);
        let e = plan.target - g.tip_image;
        if e.norm() <= cfg.insertion_step {
            break;
        }
        tip += e * (cfg.insertion_step / e.norm());
    }
    // hold still, average the readout and correct
    for _ in 0..cfg.hold_rounds {
        let mut mean = Vec3::zeros();
        for _ in 0..cfg.hold_ticks.max(1) {
            feed.send(&nav, hand.pose(tip, plan.direction, nav.now()))?;
            let now = nav.now();
            let g = nav.guidance_tick(now)?;
            mean += plan.target - g.tip_image;
        }
        tip += mean / cfg.hold_ticks.max(1) as f64;
    }
    feed.send(&nav, hand.pose(tip, plan.direction, nav.now()))?;
    let now = nav.now();
    depth_trace.push(nav.guidance_tick(now)?.depth_remaining);

    let stale_flagged = if cfg.check_staleness {
        let last = nav.slot().latest().map(|l| l.pose.timestamp).unwrap_or_default();
        let limit = nav.config().staleness_threshold;
        let tick = 1.0 / nav.config().guidance_rate_hz;
        let before = nav.guidance_tick(last + limit - tick)?;
        let after = nav.guidance_tick(last + limit + tick)?;
        Some(before.valid && !after.valid)
    } else {
        None
    };
    nav.stop_guidance()?;
    nav.save(cfg.work_dir.join("session.json"))?;

    let depth_monotone = depth_trace.windows(2).all(|w| w[1] <= w[0] + 1e-6);
    Ok(DemoReport {
        registration_error_voxels,
        pivot_error,
        fiducial_rmse,
        target_error: (plan.target - truth.lesion_image).norm(),
        final_tip: tip.into(),
        tre: (tip - truth.lesion_image).norm(),
        plan,
        depth_trace,
        depth_monotone,
        stale_flagged,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    })
}
