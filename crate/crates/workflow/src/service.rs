//! HTTP/WebSocket front end. One navigator per service; every mutation goes
//! through its mutex, and slow work runs on the blocking pool.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use petnav_core::pivot::PoseSample;
use petnav_core::planning::GuidanceState;
use petnav_core::Vec3;

use crate::navigator::{NavError, Navigator, Snapshot};
use crate::session::RegistrationMode;
use crate::slice::{encode_png, render_slice, SliceQuery};

pub const DEFAULT_HTTP_PORT: u16 = 8080;

pub type SharedNavigator = Arc<Mutex<Navigator>>;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<NavError> for ApiError {
    fn from(e: NavError) -> Self {
        let code = match &e {
            NavError::Gating(_) | NavError::StalePose { .. } | NavError::NoPose => StatusCode::CONFLICT,
            NavError::Invalid(_) | NavError::Registration(_) | NavError::Volume(_) => StatusCode::UNPROCESSABLE_ENTITY,
            NavError::Session(_) | NavError::Tracker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs `f` on the blocking pool with the navigator locked.
async fn with_nav<T: Send + 'static>(
    nav: &SharedNavigator,
    f: impl FnOnce(&mut Navigator) -> Result<T, NavError> + Send + 'static,
) -> ApiResult<T> {
    let nav = Arc::clone(nav);
    tokio::task::spawn_blocking(move || f(&mut nav.lock().unwrap()))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn snapshot_after(
    nav: &SharedNavigator,
    f: impl FnOnce(&mut Navigator) -> Result<(), NavError> + Send + 'static,
) -> ApiResult<Json<Snapshot>> {
    with_nav(nav, move |n| {
        f(n)?;
        Ok(n.snapshot())
    })
    .await
    .map(Json)
}

#[derive(Debug, Deserialize)]
pub struct VolumesRequest {
    pub comp_ct: PathBuf,
    pub comp_pet: PathBuf,
    pub interventional: PathBuf,
}

#[derive(Debug, Deserialize)]
pub struct RegistrationRequest {
    pub mode: RegistrationMode,
}

#[derive(Debug, Deserialize)]
pub struct TrackingRequest {
    pub host: String,
    pub port: u16,
}

/// Poses as 13-number records: row-major rotation, position, timestamp.
#[derive(Debug, Deserialize)]
pub struct PosesRequest {
    pub poses: Vec<[f64; 13]>,
}

#[derive(Debug, Deserialize)]
pub struct CaptureRequest {
    pub active: bool,
}

#[derive(Debug, Deserialize)]
pub struct FiducialRequest {
    pub image_point: [f64; 3],
    pub label: Option<String>,
}

#[derive(Debug, Deserialize)]
pub struct PlanRequest {
    pub entry: [f64; 3],
    pub target: [f64; 3],
}

#[derive(Debug, Deserialize)]
pub struct PathQuery {
    pub step: Option<f64>,
}

#[derive(Debug, Deserialize)]
pub struct FileRequest {
    pub path: PathBuf,
}

/// Flat guidance record streamed over the WebSocket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub time: f64,
    pub tip_x: f64,
    pub tip_y: f64,
    pub tip_z: f64,
    pub depth_remaining: f64,
    pub lateral_deviation: f64,
    pub angle_deviation: f64,
    pub pose_age: f64,
    pub valid: bool,
}

impl GuidanceRecord {
    pub fn new(time: f64, g: &GuidanceState<f64>) -> Self {
        Self {
            time,
            tip_x: g.tip_image.x,
            tip_y: g.tip_image.y,
            tip_z: g.tip_image.z,
            depth_remaining: g.depth_remaining,
            lateral_deviation: g.lateral_deviation,
            angle_deviation: g.angle_deviation,
            pose_age: g.pose_age,
            valid: g.valid,
        }
    }
}

async fn get_session(State(nav): State<SharedNavigator>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, |_| Ok(())).await
}

async fn post_volumes(State(nav): State<SharedNavigator>, Json(r): Json<VolumesRequest>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, move |n| n.set_volumes(&r.comp_ct, &r.comp_pet, &r.interventional)).await
}

async fn post_registration(
    State(nav): State<SharedNavigator>,
    Json(r): Json<RegistrationRequest>,
) -> ApiResult<Json<Snapshot>> {
    let job = with_nav(&nav, move |n| n.prepare_registration(r.mode)).await?;
    let (job, result) = tokio::task::spawn_blocking(move || {
        let result = job.run();
        (job, result)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    snapshot_after(&nav, move |n| n.commit_registration(&job, result)).await
}

async fn post_tracking(State(nav): State<SharedNavigator>, Json(r): Json<TrackingRequest>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, move |n| n.connect_tracking(&r.host, r.port)).await
}

async fn post_tracking_disconnect(State(nav): State<SharedNavigator>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, |n| n.disconnect_tracking()).await
}

async fn post_calibration_poses(
    State(nav): State<SharedNavigator>,
    Json(r): Json<PosesRequest>,
) -> ApiResult<Json<Snapshot>> {
    let poses = r.poses.iter().map(PoseSample::from_record).collect();
    snapshot_after(&nav, move |n| n.add_calibration_poses(poses).map(|_| ())).await
}

async fn post_calibration_capture(
    State(nav): State<SharedNavigator>,
    Json(r): Json<CaptureRequest>,
) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, move |n| {
        n.set_capture(r.active);
        Ok(())
    })
    .await
}

async fn post_calibration_run(State(nav): State<SharedNavigator>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, |n| n.run_calibration()).await
}

async fn post_calibration_skip(State(nav): State<SharedNavigator>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, |n| n.skip_calibration()).await
}

async fn post_fiducial(State(nav): State<SharedNavigator>, Json(r): Json<FiducialRequest>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, move |n| {
        let now = n.now();
        n.record_fiducial(Vec3::from(r.image_point), r.label, now)
    })
    .await
}

async fn post_fiducial_clear(State(nav): State<SharedNavigator>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, |n| n.clear_fiducials()).await
}

async fn post_plan(State(nav): State<SharedNavigator>, Json(r): Json<PlanRequest>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, move |n| n.set_plan(Vec3::from(r.entry), Vec3::from(r.target))).await
}

async fn get_plan_path(State(nav): State<SharedNavigator>, Query(q): Query<PathQuery>) -> ApiResult<Json<Vec<[f64; 3]>>> {
    let step = q.step.unwrap_or(5.0);
    with_nav(&nav, move |n| {
        let plan = n.session().plan.as_ref().ok_or_else(|| NavError::Invalid("no plan set".into()))?;
        let pts = plan.sample_path(step).map_err(|e| NavError::Invalid(e.to_string()))?;
        Ok(pts.iter().map(|p| [p.x, p.y, p.z]).collect())
    })
    .await
    .map(Json)
}

async fn post_guidance_stop(State(nav): State<SharedNavigator>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, |n| n.stop_guidance()).await
}

async fn post_save(State(nav): State<SharedNavigator>, Json(r): Json<FileRequest>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, move |n| n.save(&r.path)).await
}

async fn post_load(State(nav): State<SharedNavigator>, Json(r): Json<FileRequest>) -> ApiResult<Json<Snapshot>> {
    snapshot_after(&nav, move |n| {
        *n = Navigator::load(&r.path)?;
        Ok(())
    })
    .await
}

async fn get_slice(State(nav): State<SharedNavigator>, Query(q): Query<SliceQuery>) -> ApiResult<Response> {
    let png = with_nav(&nav, move |n| {
        let vols = n.volumes().ok_or_else(|| NavError::Invalid("volumes are not loaded".into()))?;
        let plane = render_slice(vols, n.session().registration.as_ref(), &q)?;
        Ok(encode_png(&plane))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn guidance_ws(State(nav): State<SharedNavigator>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_guidance(nav, socket))
}

/// Pushes one record per tick; gating failures are reported once per change
/// and ticking continues so the stream starts as soon as guidance is allowed.
async fn stream_guidance(nav: SharedNavigator, mut socket: WebSocket) {
    let rate = nav.lock().unwrap().config().guidance_rate_hz.max(0.1);
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / rate));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut last_error: Option<String> = None;
    loop {
        tokio::select! {
            _ = ticker.tick() => {}
            incoming = socket.recv() => match incoming {
                Some(Ok(WsMessage::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => continue,
            },
        }
        let result = with_nav(&nav, |n| {
            let now = n.now();
            n.guidance_tick(now).map(|g| GuidanceRecord::new(now, &g))
        })
        .await;
        let text = match result {
            Ok(rec) => {
                last_error = None;
                serde_json::to_string(&rec).expect("record serializes")
            }
            Err(ApiError(_, msg)) => {
                if last_error.as_deref() == Some(msg.as_str()) {
                    continue;
                }
                last_error = Some(msg.clone());
                serde_json::json!({ "error": msg }).to_string()
            }
        };
        if socket.send(WsMessage::Text(text.into())).await.is_err() {
            return;
        }
    }
}

pub fn router(nav: SharedNavigator) -> Router {
    Router::new()
        .route("/session", get(get_session))
        .route("/session/volumes", post(post_volumes))
        .route("/session/registration", post(post_registration))
        .route("/session/tracking", post(post_tracking))
        .route("/session/tracking/disconnect", post(post_tracking_disconnect))
        .route("/session/calibration/poses", post(post_calibration_poses))
        .route("/session/calibration/capture", post(post_calibration_capture))
        .route("/session/calibration/run", post(post_calibration_run))
        .route("/session/calibration/skip", post(post_calibration_skip))
        .route("/session/fiducial", post(post_fiducial))
        .route("/session/fiducial/clear", post(post_fiducial_clear))
        .route("/session/plan", post(post_plan))
        .route("/session/plan/path", get(get_plan_path))
        .route("/session/guidance/stop", post(post_guidance_stop))
        .route("/session/save", post(post_save))
        .route("/session/load", post(post_load))
        .route("/slice", get(get_slice))
        .route("/guidance", get(guidance_ws))
        .with_state(nav)
}

/// Binds and serves in the background; returns the bound address.
pub async fn spawn_service(
    nav: SharedNavigator,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(nav);
    let handle = tokio::spawn(async move { axum::serve(listener, app).await });
    Ok((local, handle))
}

/// HTTP port from `NAV_HTTP_PORT`, else the default.
pub fn http_port_from_env() -> u16 {
    std::env::var("NAV_HTTP_PORT").ok().and_then(|v| v.parse().ok()).unwrap_or(DEFAULT_HTTP_PORT)
}

/// Tracker port from `NAV_TRACKER_PORT`, else the default.
pub fn tracker_port_from_env() -> u16 {
    std::env::var("NAV_TRACKER_PORT").ok().and_then(|v| v.parse().ok()).unwrap_or(petnav_igtl::DEFAULT_PORT)
}
