//! HTTP job API for mesh upload, structure estimation and threshold
//! extraction. All routes live under `/api`.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use s2s_core::geometry::{export_mesh, parse_mesh, Axis, ExportFormat, MeshFormat};
use s2s_core::pipeline::InferParams;
use s2s_core::train::checkpoint::load_generator;
use s2s_core::train::GENERATOR_FILE;

mod store;

pub use store::{is_id, JobRecord, JobState, JobStatus, MeshRecord, Store};

pub const DEFAULT_UPLOAD_LIMIT: usize = 64 << 20;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub artifact_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub workers: usize,
    pub upload_limit: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            artifact_dir: PathBuf::from("artifacts"),
            checkpoint_dir: PathBuf::from("ckpt"),
            workers: 1,
            upload_limit: DEFAULT_UPLOAD_LIMIT,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id:?}"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.status.as_u16(), "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Build the router over an opened store.
pub fn router(store: Arc<Store>) -> Router {
    Router::new()
        .route("/api/models", post(create_model).layer(DefaultBodyLimit::disable()))
        .route("/api/models/{id}/jobs", post(create_job))
        .route("/api/jobs/{id}", get(job_status))
        .route("/api/jobs/{id}/slices/{k}", get(job_slice))
        .route("/api/jobs/{id}/extract", post(extract))
        .route("/api/meshes/{id}", get(download_mesh))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such route") })
        .with_state(store)
}

pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(config, listener).await
}

/// Serve on an already bound listener, e.g. one on an ephemeral port.
pub async fn serve_on(config: ServiceConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let store = Store::open(config)?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn create_model(
    State(store): State<Arc<Store>>,
    Query(q): Query<FormatQuery>,
    headers: HeaderMap,
    body: Body,
) -> ApiResult<impl IntoResponse> {
    let limit = store.config.upload_limit;
    let too_large = || {
        ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, format!("upload exceeds the {limit}-byte limit"))
    };
    let declared = headers
        .get(header::CONTENT_LENGTH)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    if declared.is_some_and(|n| n > limit as u64) {
        return Err(too_large());
    }
    let format: MeshFormat = q
        .format
        .as_deref()
        .unwrap_or("auto")
        .parse()
        .map_err(|e: s2s_core::Error| ApiError::unprocessable(e.to_string()))?;
    let bytes = to_bytes(body, limit).await.map_err(|_| too_large())?;
    let mesh = blocking(move || parse_mesh(&bytes, format))
        .await?
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let id = {
        let store = Arc::clone(&store);
        blocking(move || store.save_model(&mesh)).await?.map_err(ApiError::internal)?
    };
    Ok((StatusCode::CREATED, Json(json!({ "model_id": id }))))
}

#[derive(Deserialize)]
#[serde(default, deny_unknown_fields)]
struct JobRequest {
    axis: String,
    resolution: usize,
    checkpoint: String,
}

impl Default for JobRequest {
    fn default() -> Self {
        JobRequest {
            axis: "z".into(),
            resolution: 64,
            checkpoint: "default".into(),
        }
    }
}

/// Checkpoint file for a name: "default" is the trained generator, other
/// names are files in the checkpoint directory, with or without extension.
fn checkpoint_path(store: &Store, name: &str) -> Option<PathBuf> {
    let plain = !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c));
    if !plain {
        return None;
    }
    let dir = &store.config.checkpoint_dir;
    let file = if name == "default" { GENERATOR_FILE.to_string() } else { name.to_string() };
    [dir.join(&file), dir.join(format!("{file}.s2s1"))].into_iter().find(|p| p.is_file())
}

async fn create_job(
    State(store): State<Arc<Store>>,
    Path(model_id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<impl IntoResponse> {
    if !store.model_exists(&model_id) {
        return Err(ApiError::not_found("model", &model_id));
    }
    let req: JobRequest = if body.iter().all(u8::is_ascii_whitespace) {
        JobRequest::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("bad job request: {e}")))?
    };
    let axis: Axis = req.axis.parse().map_err(|e: s2s_core::Error| ApiError::unprocessable(e.to_string()))?;
    let ckpt = checkpoint_path(&store, &req.checkpoint)
        .ok_or_else(|| ApiError::not_found("checkpoint", &req.checkpoint))?;
    let resolution = {
        let ckpt = ckpt.clone();
        blocking(move || load_generator(ckpt).map(|g| g.resolution())).await?
    }
    .map_err(|e| ApiError::unprocessable(format!("checkpoint {:?} is unusable: {e}", req.checkpoint)))?;
    if resolution != req.resolution {
        return Err(ApiError::unprocessable(format!(
            "checkpoint {:?} works at resolution {resolution}, requested {}",
            req.checkpoint, req.resolution
        )));
    }
    let record = JobRecord {
        job_id: store::new_id(),
        model_id,
        params: InferParams {
            axis,
            resolution: req.resolution,
            ..InferParams::default()
        },
        checkpoint: req.checkpoint,
    };
    let id = store.submit(record, ckpt);
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))))
}

async fn job_status(State(store): State<Arc<Store>>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    store.status(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

fn finished_volume(
    store: &Store,
    id: &str,
) -> ApiResult<(Arc<s2s_core::geometry::VolumeGrid>, Axis)> {
    match store.volume(id) {
        None => Err(ApiError::not_found("job", id)),
        Some((_, Some(v))) => Ok(v),
        Some((state, None)) => Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("job {id} is {}, not done", serde_json::to_value(state).unwrap().as_str().unwrap()),
        )),
    }
}

async fn job_slice(
    State(store): State<Arc<Store>>,
    Path((id, k)): Path<(String, String)>,
) -> ApiResult<impl IntoResponse> {
    let (volume, _) = finished_volume(&store, &id)?;
    let nz = volume.plane_count();
    let plane = k
        .parse::<usize>()
        .ok()
        .filter(|&k| k < nz)
        .ok_or_else(|| ApiError::unprocessable(format!("slice index must be in [0, {nz}), got {k:?}")))?;
    let img = volume.plane(plane).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/x-portable-graymap")], img.to_pgm()))
}

#[derive(Deserialize)]
struct ExtractRequest {
    threshold: f64,
}

async fn extract(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> ApiResult<Json<MeshRecordView>> {
    let (volume, axis) = finished_volume(&store, &id)?;
    let req: ExtractRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("bad extract request: {e}")))?;
    let t = req.threshold;
    if !(t > 0.0 && t < 1.0) {
        return Err(ApiError::unprocessable(format!("threshold must lie in (0, 1), got {t}")));
    }
    if let Some(r) = store.cached_extraction(&id, t) {
        return Ok(Json(r.into()));
    }
    let record = {
        let store = Arc::clone(&store);
        blocking(move || store.extract(&id, &volume, axis, t)).await?
    }
    .map_err(ApiError::internal)?;
    Ok(Json(record.into()))
}

#[derive(serde::Serialize)]
struct MeshRecordView {
    mesh_id: String,
    voxels_above: usize,
    triangles: usize,
}

impl From<MeshRecord> for MeshRecordView {
    fn from(r: MeshRecord) -> Self {
        MeshRecordView {
            mesh_id: r.mesh_id,
            voxels_above: r.voxels_above,
            triangles: r.triangles,
        }
    }
}

async fn download_mesh(
    State(store): State<Arc<Store>>,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<impl IntoResponse> {
    if !store.mesh_exists(&id) {
        return Err(ApiError::not_found("mesh", &id));
    }
    let (format, mime, ext) = match q.format.as_deref().unwrap_or("stl") {
        "stl" => (ExportFormat::StlBinary, "model/stl", "stl"),
        "obj" => (ExportFormat::Obj, "model/obj", "obj"),
        other => return Err(ApiError::unprocessable(format!("format must be stl or obj, got {other:?}"))),
    };
    let bytes = {
        let store = Arc::clone(&store);
        let id = id.clone();
        blocking(move || store.load_mesh(&id).map(|m| export_mesh(&m, format))).await?
    }
    .map_err(ApiError::internal)?;
    let disposition = format!("attachment; filename=\"{id}.{ext}\"");
    Ok((
        [(header::CONTENT_TYPE, mime.to_string()), (header::CONTENT_DISPOSITION, disposition)],
        bytes,
    ))
}
