//! HTTP inference service.
//!
//! * `GET /health` → `{"status", "model_version"}`
//! * `POST /synthesize` (multipart: `keyframe0`, `keyframe1`, `sketch` PNG files;
//!   fields `t`, `times` (repeated or comma separated), `temporal`) → JSON
//!   manifest with base64 PNG frames, or `multipart/mixed` when the `Accept`
//!   header asks for it.
//! * `POST /debug/intermediates` (same inputs) → flows as base64 `.flo`, masks as base64 PNG.
//!
//! An optional `model` field must match the loaded model version.
//!
//! Every response carries `x-request-id`, a hash of the model version and the
//! request content, so identical requests get identical ids.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use toonbetween_core::{io, Frame, Sketch};
use toonbetween_model::Model;

pub const MAX_WIDTH: usize = 1920;
pub const MAX_HEIGHT: usize = 1080;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_body_bytes: usize,
    pub timeout: Duration,
    /// Concurrent inference jobs.
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { max_body_bytes: 32 << 20, timeout: Duration::from_secs(300), workers: 1 }
    }
}

pub struct AppState {
    model: Option<Arc<Model>>,
    model_version: String,
    config: ServiceConfig,
    workers: Semaphore,
}

impl AppState {
    pub fn new(model: Option<Model>, model_version: impl Into<String>, config: ServiceConfig) -> Self {
        let workers = Semaphore::new(config.workers.max(1));
        Self { model: model.map(Arc::new), model_version: model_version.into(), config, workers }
    }
}

pub fn router(state: AppState) -> Router {
    let limit = state.config.max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/synthesize", post(synthesize))
        .route("/debug/intermediates", post(intermediates))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(Arc::new(state))
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    request_id: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), request_id: None }
    }

    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn with_id(mut self, id: &str) -> Self {
        self.request_id = Some(id.to_string());
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message }, "request_id": self.request_id });
        let mut resp = (self.status, Json(body)).into_response();
        if let Some(id) = self.request_id.and_then(|id| HeaderValue::from_str(&id).ok()) {
            resp.headers_mut().insert("x-request-id", id);
        }
        resp
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let status = if state.model.is_some() { "ok" } else { "model_not_loaded" };
    let id = request_id(&state.model_version, "health", "");
    let mut resp = Json(json!({ "status": status, "model_version": state.model_version, "request_id": id })).into_response();
    resp.headers_mut().insert("x-request-id", HeaderValue::from_str(&id).expect("hex id"));
    resp
}

/// Parsed `/synthesize` form.
#[derive(Debug, Clone)]
pub struct SynthesisRequest {
    pub keyframe0: Frame,
    pub keyframe1: Frame,
    pub sketch: Sketch,
    pub t: f64,
    pub times: Vec<f64>,
    pub temporal: bool,
    /// Requested model version, if any.
    pub model: Option<String>,
    /// Hash of the raw inputs.
    pub digest: String,
}

fn parse_flag(v: &str) -> Option<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Some(true),
        "0" | "false" | "off" | "no" => Some(false),
        _ => None,
    }
}

fn parse_time(name: &str, v: &str) -> Result<f64, ApiError> {
    let x: f64 = v.trim().parse().map_err(|_| ApiError::bad("invalid_field", format!("{name}: not a number: {v:?}")))?;
    if !(x > 0.0 && x < 1.0) {
        return Err(ApiError::bad("invalid_field", format!("{name} = {x} outside (0, 1)")));
    }
    Ok(x)
}

fn check_size(name: &str, dims: (usize, usize)) -> Result<(), ApiError> {
    if dims.0 > MAX_HEIGHT || dims.1 > MAX_WIDTH {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "resolution_too_large",
            format!("{name} is {}x{}, limit {MAX_WIDTH}x{MAX_HEIGHT}", dims.1, dims.0),
        ));
    }
    Ok(())
}

/// Parses a form; every error carries the request id derived from the parts
/// read so far.
async fn read_form(
    form: Result<Multipart, MultipartRejection>,
    need_times: bool,
    version: &str,
    route: &str,
) -> Result<(SynthesisRequest, String), ApiError> {
    let mut parts = Vec::new();
    let res = match collect_parts(form, &mut parts).await {
        Ok(()) => build_request(parts.clone(), need_times),
        Err(e) => Err(e),
    };
    let id = request_id(version, route, &digest(&parts));
    match res {
        Ok(r) => Ok((r, id)),
        Err(e) => Err(e.with_id(&id)),
    }
}

async fn collect_parts(form: Result<Multipart, MultipartRejection>, parts: &mut Vec<(String, Vec<u8>)>) -> Result<(), ApiError> {
    let mut form = form.map_err(|e| ApiError::bad("malformed_multipart", e.body_text()))?;
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => {
                return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.body_text()))
            }
            Err(e) => return Err(ApiError::bad("malformed_multipart", e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b.to_vec(),
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => {
                return Err(ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large", e.body_text()))
            }
            Err(e) => return Err(ApiError::bad("malformed_multipart", e.body_text())),
        };
        parts.push((name, bytes));
    }
}

fn digest(parts: &[(String, Vec<u8>)]) -> String {
    let mut hasher = Sha256::new();
    // stable sort by name: reordering distinct fields keeps the digest, repeated fields keep their order
    let mut order: Vec<&(String, Vec<u8>)> = parts.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, bytes) in order {
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(bytes);
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn build_request(parts: Vec<(String, Vec<u8>)>, need_times: bool) -> Result<SynthesisRequest, ApiError> {
    let digest = digest(&parts);
    let mut k0 = None;
    let mut k1 = None;
    let mut sk = None;
    let mut t = None;
    let mut times = Vec::new();
    let mut temporal = false;
    let mut model = None;
    for (name, bytes) in parts {
        let text = || String::from_utf8(bytes.clone()).map_err(|_| ApiError::bad("invalid_field", format!("{name} is not text")));
        match name.as_str() {
            "keyframe0" | "keyframe1" => {
                let f = io::decode_frame(&bytes).map_err(|e| ApiError::bad("invalid_image", format!("{name}: {e}")))?;
                check_size(&name, f.dims())?;
                if name == "keyframe0" {
                    k0 = Some(f);
                } else {
                    k1 = Some(f);
                }
            }
            "sketch" => {
                let s = io::decode_sketch(&bytes).map_err(|e| ApiError::bad("invalid_image", format!("sketch: {e}")))?;
                check_size("sketch", s.dims())?;
                sk = Some(s);
            }
            "t" => t = Some(parse_time("t", &text()?)?),
            "times" | "times[]" => {
                for v in text()?.split(',').filter(|v| !v.trim().is_empty()) {
                    times.push(parse_time("times", v)?);
                }
            }
            "temporal" => {
                let v = text()?;
                temporal = parse_flag(&v).ok_or_else(|| ApiError::bad("invalid_field", format!("temporal: {v:?}")))?;
            }
            "model" => model = Some(text()?.trim().to_string()).filter(|m| !m.is_empty()),
            other => return Err(ApiError::bad("unknown_field", format!("unexpected field {other:?}"))),
        }
    }
    let missing = |n: &str| ApiError::bad("missing_field", format!("missing field {n}"));
    let keyframe0 = k0.ok_or_else(|| missing("keyframe0"))?;
    let keyframe1 = k1.ok_or_else(|| missing("keyframe1"))?;
    let sketch = sk.ok_or_else(|| missing("sketch"))?;
    let t = if need_times { t.ok_or_else(|| missing("t"))? } else { t.unwrap_or(0.5) };
    if need_times && times.is_empty() {
        times.push(t);
    }
    if times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ApiError::bad("invalid_field", "times must be strictly increasing"));
    }
    if keyframe0.dims() != keyframe1.dims() || sketch.dims() != keyframe0.dims() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "resolution_mismatch",
            format!("keyframe0 {:?}, keyframe1 {:?}, sketch {:?}", keyframe0.dims(), keyframe1.dims(), sketch.dims()),
        ));
    }
    let (h, w) = keyframe0.dims();
    if h < 8 || w < 8 {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "resolution_too_small", format!("{w}x{h} is below 8x8")));
    }
    Ok(SynthesisRequest { keyframe0, keyframe1, sketch, t, times, temporal, model, digest })
}

fn request_id(version: &str, route: &str, digest: &str) -> String {
    let mut h = Sha256::new();
    h.update(version.as_bytes());
    h.update([0]);
    h.update(route.as_bytes());
    h.update([0]);
    h.update(digest.as_bytes());
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

/// Runs blocking inference on the worker pool with the configured timeout.
async fn run_job<R: Send + 'static>(
    state: &Arc<AppState>,
    id: &str,
    wanted: Option<&str>,
    job: impl FnOnce(&Model) -> Result<R, toonbetween_core::Error> + Send + 'static,
) -> Result<R, ApiError> {
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model is loaded").with_id(id))?;
    if let Some(w) = wanted.filter(|w| *w != state.model_version) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "unknown_model",
            format!("model {w:?} is not loaded (serving {})", state.model_version),
        )
        .with_id(id));
    }
    let _permit = state.workers.acquire().await.expect("semaphore never closed");
    let handle = tokio::task::spawn_blocking(move || job(&model));
    match tokio::time::timeout(state.config.timeout, handle).await {
        Err(_) => Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "timeout", "inference exceeded the time limit").with_id(id)),
        Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).with_id(id)),
        Ok(Ok(Err(e))) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()).with_id(id)),
        Ok(Ok(Ok(r))) => Ok(r),
    }
}

#[derive(Debug, Serialize)]
struct FrameEntry {
    index: usize,
    time: f64,
    name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    png_base64: Option<String>,
}

fn wants_multipart(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("multipart/"))
}

async fn synthesize(State(state): State<Arc<AppState>>, headers: HeaderMap, form: Result<Multipart, MultipartRejection>) -> Result<Response, ApiError> {
    let multipart = wants_multipart(&headers);
    let route = if multipart { "synthesize/multipart" } else { "synthesize/json" };
    let (req, id) = read_form(form, true, &state.model_version, route).await?;
    let (t, times, temporal, wanted) = (req.t, req.times.clone(), req.temporal, req.model.clone());
    let frames = run_job(&state, &id, wanted.as_deref(), move |m| {
        m.interpolate_sequence(&req.keyframe0, &req.keyframe1, &req.sketch, req.t, &req.times, req.temporal)
    })
    .await?;
    let pngs = frames
        .iter()
        .map(io::encode_frame_png)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).with_id(&id))?;
    let entries: Vec<FrameEntry> = times
        .iter()
        .zip(&pngs)
        .enumerate()
        .map(|(i, (&time, png))| FrameEntry {
            index: i,
            time,
            name: format!("frame_{i:03}.png"),
            png_base64: (!multipart).then(|| B64.encode(png)),
        })
        .collect();
    let manifest = json!({
        "request_id": id,
        "model_version": state.model_version,
        "t": t,
        "times": times,
        "temporal": temporal,
        "frames": entries,
    });
    let mut resp = if multipart {
        let boundary = format!("tb-{id}");
        let mut body = Vec::new();
        let mut part = |ctype: &str, name: &str, data: &[u8]| {
            body.extend_from_slice(format!("--{boundary}\r\nContent-Type: {ctype}\r\nContent-Disposition: attachment; name=\"{name}\"\r\n\r\n").as_bytes());
            body.extend_from_slice(data);
            body.extend_from_slice(b"\r\n");
        };
        part("application/json", "manifest", manifest.to_string().as_bytes());
        for (e, png) in entries.iter().zip(&pngs) {
            part("image/png", &e.name, png);
        }
        body.extend_from_slice(format!("--{boundary}--\r\n").as_bytes());
        let mut r = Response::new(Body::from(body));
        r.headers_mut().insert(
            header::CONTENT_TYPE,
            HeaderValue::from_str(&format!("multipart/mixed; boundary={boundary}")).expect("ascii boundary"),
        );
        r
    } else {
        Json(manifest).into_response()
    };
    resp.headers_mut().insert("x-request-id", HeaderValue::from_str(&id).expect("hex id"));
    Ok(resp)
}

async fn intermediates(State(state): State<Arc<AppState>>, form: Result<Multipart, MultipartRejection>) -> Result<Response, ApiError> {
    let (req, id) = read_form(form, false, &state.model_version, "debug/intermediates").await?;
    let wanted = req.model.clone();
    let out = run_job(&state, &id, wanted.as_deref(), move |m| m.synthesize_middle(&req.sketch, &req.keyframe0, &req.keyframe1)).await?;
    let png = |g: &toonbetween_core::Grid| {
        io::encode_gray_png(g)
            .map(|b| B64.encode(b))
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).with_id(&id))
    };
    let f = &out.flows;
    let body = json!({
        "request_id": id,
        "model_version": state.model_version,
        "flows": {
            "f_t0": B64.encode(io::encode_flo(&f.f_t0)),
            "f_0t": B64.encode(io::encode_flo(&f.f_0t)),
            "f_t1": B64.encode(io::encode_flo(&f.f_t1)),
            "f_1t": B64.encode(io::encode_flo(&f.f_1t)),
        },
        "masks": {
            "occlusion_t0": png(out.occlusion.0.grid())?,
            "occlusion_t1": png(out.occlusion.1.grid())?,
            "blend": png(out.blend_mask.grid())?,
        },
        "frame_t": B64.encode(io::encode_frame_png(&out.frame).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()).with_id(&id))?),
    });
    let mut resp = Json(body).into_response();
    resp.headers_mut().insert("x-request-id", HeaderValue::from_str(&id).expect("hex id"));
    Ok(resp)
}
