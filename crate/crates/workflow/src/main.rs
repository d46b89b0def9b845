use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use petnav_core::intensity::{register_bspline_mi, register_rigid_mi, RegistrationConfig};
use petnav_core::landmark::register_landmarks;
use petnav_core::nrrd::{load_volume, save_volume};
use petnav_core::phantom::{generate_phantom, stream_needle_poses, PhantomConfig, Trajectory};
use petnav_core::pivot::solve_pivot;
use petnav_core::transforms::Rigid;
use petnav_igtl::{encode_transform, TrackerServer, DEFAULT_QUEUE_CAPACITY};
use petnav_workflow::demo::{builtin_trajectory, run_demo, DemoConfig, Transport};
use petnav_workflow::files::{format_transform, parse_pairs, parse_poses};
use petnav_workflow::navigator::{matrix_from_pose, phantom_paths};
use petnav_workflow::service::{http_port_from_env, spawn_service, tracker_port_from_env};
use petnav_workflow::session::RegistrationMode;
use petnav_workflow::{Navigator, SessionConfig};

#[derive(Parser)]
#[command(name = "petnav", version, about = "PET/CT-guided needle navigation tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Volume file utilities.
    Volume {
        #[command(subcommand)]
        action: VolumeCmd,
    },
    /// Mutual-information registration of two volumes.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Add the B-spline stage after rigid alignment.
        #[arg(long)]
        deformable: bool,
        #[arg(long)]
        out: PathBuf,
        /// Registration settings (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Point-based registration from a pairs file.
    RegisterLandmarks {
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Tip offset from a pivoting pose file.
    PivotCalibrate {
        #[arg(long)]
        poses: PathBuf,
    },
    /// Stream tracked poses to tracker clients.
    TrackerServe {
        #[arg(long)]
        port: Option<u16>,
        /// `sim` for the phantom simulator, otherwise a pose file.
        #[arg(long, default_value = "sim")]
        source: String,
        /// Builtin trajectory name or trajectory file (sim source only).
        #[arg(long, default_value = "pivot")]
        trajectory: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restart the stream when it ends.
        #[arg(long)]
        repeat: bool,
    },
    /// Phantom simulator.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Navigation sessions.
    Session {
        #[command(subcommand)]
        action: SessionCmd,
    },
    /// Run the HTTP/WebSocket service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        /// Restore this session file at startup.
        #[arg(long)]
        session: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VolumeCmd {
    /// Print dims, spacing, origin and value range.
    Info { path: PathBuf },
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Write the three study volumes and the truth file.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Clinical scan sizes instead of the small default grids.
        #[arg(long)]
        full_size: bool,
    },
    /// Stream simulated needle poses.
    Stream {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long, default_value = "insertion")]
        trajectory: String,
        #[arg(long)]
        repeat: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Direct,
    Tcp,
}

#[derive(Subcommand)]
enum SessionCmd {
    /// Scripted full workflow against the simulator.
    RunDemo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pose noise sigma (mm per axis).
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, value_enum, default_value = "tcp")]
        transport: TransportArg,
        #[arg(long)]
        deformable: bool,
        #[arg(long, default_value = "demo-out")]
        out_dir: PathBuf,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        Ok(serde_json::from_str(&text)?)
    } else {
        Ok(toml::from_str(&text)?)
    }
}

fn load_trajectory(name: &str, cfg: &PhantomConfig) -> anyhow::Result<Trajectory> {
    if let Some(t) = builtin_trajectory(name, cfg) {
        return Ok(t);
    }
    read_config::<Option<Trajectory>>(Some(Path::new(name)))?
        .with_context(|| format!("'{name}' is neither a builtin trajectory (pivot, insertion, static) nor a file"))
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

fn print_rigid(t: &Rigid<f64>) {
    let a = t.to_array();
    for r in 0..3 {
        println!("  {}  | {:.6}", fmt_vec(&a[3 * r..3 * r + 3]), a[9 + r]);
    }
}

/// Streams encoded frames at `rate` once a client is connected.
fn serve_frames(port: u16, frames: Vec<Vec<u8>>, rate: f64, repeat: bool) -> anyhow::Result<()> {
    let server = TrackerServer::bind((Ipv4Addr::UNSPECIFIED, port), DEFAULT_QUEUE_CAPACITY)?;
    println!("tracker server on {}", server.local_addr());
    loop {
        while server.client_count() == 0 {
            std::thread::sleep(Duration::from_millis(50));
        }
        println!("streaming {} poses at {rate} Hz to {} client(s)", frames.len(), server.client_count());
        server.stream(frames.iter().cloned(), rate);
        if !repeat {
            // let writers drain before the server goes away
            std::thread::sleep(Duration::from_millis(200));
            return Ok(());
        }
    }
}

fn sim_frames(cfg: &PhantomConfig, trajectory: &str) -> anyhow::Result<Vec<Vec<u8>>> {
    let traj = load_trajectory(trajectory, cfg)?;
    stream_needle_poses(cfg, &traj, 0.0)
        .iter()
        .map(|p| Ok(encode_transform("NeedleTip", p.timestamp, &matrix_from_pose(p))?))
        .collect()
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    match Cli::parse().command {
        Command::Volume { action: VolumeCmd::Info { path } } => {
            let v = load_volume(&path)?;
            let (lo, hi) = v.min_max();
            println!("modality: {}", v.modality().as_str());
            println!("scalar:   {:?}", v.scalar_type());
            println!("dims:     {:?}", v.dims());
            println!("spacing:  {}", fmt_vec(v.spacing().as_slice()));
            println!("origin:   {}", fmt_vec(v.origin().as_slice()));
            println!("range:    {lo} .. {hi}");
        }
        Command::Register { fixed, moving, deformable, out, config } => {
            let cfg: RegistrationConfig = read_config(config.as_deref())?;
            let (f, m) = (load_volume(&fixed)?, load_volume(&moving)?);
            let t0 = Instant::now();
            let rigid = register_rigid_mi(&f, &m, &Rigid::identity(), &cfg)?;
            println!("rigid: initial MI {:.6} bits, final MI {:.6} bits ({} passes)", rigid.initial_mi, rigid.final_mi, rigid.iterations);
            let grid = if deformable {
                let b = register_bspline_mi(&f, &m, &rigid.final_transform, &cfg)?;
                println!("b-spline: initial MI {:.6} bits, final MI {:.6} bits ({} iterations)", b.initial_mi, b.final_mi, b.iterations);
                b.grid
            } else {
                None
            };
            std::fs::write(&out, format_transform(&rigid.final_transform, grid.as_ref()))?;
            println!("fixed -> moving transform written to {} in {:.1} s", out.display(), t0.elapsed().as_secs_f64());
        }
        Command::RegisterLandmarks { pairs } => {
            let pairs = parse_pairs(&std::fs::read_to_string(&pairs)?).map_err(anyhow::Error::msg)?;
            let r = register_landmarks(&pairs)?;
            println!("tracker -> image transform:");
            print_rigid(&r.transform);
            println!("rmse: {:.6} mm", r.rmse);
            for (p, e) in pairs.iter().zip(&r.per_pair_residuals) {
                println!("  {}: {:.6} mm", p.label, e);
            }
        }
        Command::PivotCalibrate { poses } => {
            let poses = parse_poses(&std::fs::read_to_string(&poses)?).map_err(anyhow::Error::msg)?;
            let r = solve_pivot(&poses)?;
            println!("tip offset:  {}", fmt_vec(r.tip_offset.as_slice()));
            println!("pivot point: {}", fmt_vec(r.pivot_point.as_slice()));
            println!("rms:         {:.6} mm over {} poses", r.rms_residual, r.n_poses);
        }
        Command::TrackerServe { port, source, trajectory, config, repeat } => {
            let cfg: PhantomConfig = read_config(config.as_deref())?;
            let port = port.unwrap_or_else(tracker_port_from_env);
            let frames = if source == "sim" {
                sim_frames(&cfg, &trajectory)?
            } else {
                let poses = parse_poses(&std::fs::read_to_string(&source)?).map_err(anyhow::Error::msg)?;
                poses
                    .iter()
                    .map(|p| Ok(encode_transform("NeedleTip", p.timestamp, &matrix_from_pose(p))?))
                    .collect::<anyhow::Result<_>>()?
            };
            serve_frames(port, frames, cfg.stream_rate, repeat)?;
        }
        Command::Phantom { action: PhantomCmd::Generate { config, out_dir, full_size } } => {
            let mut cfg: PhantomConfig = read_config(config.as_deref())?;
            if full_size {
                cfg = cfg.full_size();
            }
            let ph = generate_phantom(&cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            let [ct, pet, ict] = phantom_paths(&out_dir);
            save_volume(&ph.comp_ct, &ct)?;
            save_volume(&ph.comp_pet, &pet)?;
            save_volume(&ph.interventional_ct, &ict)?;
            std::fs::write(out_dir.join("truth.txt"), ph.truth.to_text())?;
            println!("wrote {}, {}, {} and truth.txt", ct.display(), pet.display(), ict.display());
        }
        Command::Phantom { action: PhantomCmd::Stream { config, port, trajectory, repeat } } => {
            let cfg: PhantomConfig = read_config(config.as_deref())?;
            let frames = sim_frames(&cfg, &trajectory)?;
            serve_frames(port.unwrap_or_else(tracker_port_from_env), frames, cfg.stream_rate, repeat)?;
        }
        Command::Session { action: SessionCmd::RunDemo { config, seed, noise, transport, deformable, out_dir, json } } => {
            let mut phantom: PhantomConfig = read_config(config.as_deref())?;
            if let Some(s) = seed {
                phantom.seed = s;
            }
            if let Some(n) = noise {
                phantom.pose_noise_sigma = n;
            }
            let mut cfg = DemoConfig::new(phantom, out_dir);
            cfg.transport = match transport {
                TransportArg::Direct => Transport::Direct,
                TransportArg::Tcp => Transport::Tcp,
            };
            cfg.mode = if deformable { RegistrationMode::Deformable } else { RegistrationMode::Rigid };
            cfg.check_staleness = true;
            let r = run_demo(&cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!("registration error: {:.3} voxel", r.registration_error_voxels);
                println!("pivot tip error:    {:.3e} mm", r.pivot_error);
                println!("fiducial rmse:      {:.3e} mm", r.fiducial_rmse);
                println!("target error:       {:.3} mm", r.target_error);
                println!("plan length:        {:.1} mm", r.plan.length);
                println!("final TRE:          {:.3} mm", r.tre);
                println!("depth monotone:     {}", r.depth_monotone);
                if let Some(s) = r.stale_flagged {
                    println!("stale flagged:      {s}");
                }
                println!("elapsed:            {:.1} s", r.elapsed_seconds);
            }
        }
        Command::Serve { port, session } => {
            let nav = match session {
                Some(p) => Navigator::load(&p)?,
                None => Navigator::new(SessionConfig::default()),
            };
            let port = port.unwrap_or_else(http_port_from_env);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let (addr, handle) =
                    spawn_service(Arc::new(Mutex::new(nav)), SocketAddr::from((Ipv4Addr::UNSPECIFIED, port))).await?;
                tracing::info!("navigation service listening on http://{addr}");
                tokio::select! {
                    r = handle => r??,
                    _ = tokio::signal::ctrl_c() => tracing::info!("shutting down"),
                }
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
