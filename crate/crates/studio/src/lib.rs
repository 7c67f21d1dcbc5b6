//! Local HTTP service over the stylization pipelines.
//!
//! Models are loaded once and shared read-only. Synchronous endpoints run on
//! a bounded worker pool and answer 503 when it is full; reference
//! inversions run as background jobs that queue for a worker.

mod jobs;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use portraitgan::encoder::Encoder;
use portraitgan::image::center_square;
use portraitgan::inversion::{embed_reference, image_hash, InvertConfig, ReferenceCache, SefaBasis};
use portraitgan::losses::LossNets;
use portraitgan::stylize::{content_code, multimodal_code, reference_code, stylize_general, MixSpec, StylePolicy};
use portraitgan::generator::synthesize;
use portraitgan::{Generator, Image};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub use jobs::{Job, JobKind, JobStatus};
use jobs::JobTable;

/// One servable style: its policy, fine-tuned generator and `V` basis.
pub struct StyleModel {
    pub policy: StylePolicy,
    pub generator: Generator,
    pub basis: SefaBasis,
}

pub struct Models {
    pub styles: BTreeMap<String, StyleModel>,
    pub encoder_w: Encoder,
    pub nets: LossNets,
    pub cache: ReferenceCache,
    pub invert: InvertConfig,
}

struct Shared {
    models: Models,
    hashes: HashMap<String, (String, String)>,
    jobs: RwLock<JobTable>,
    inflight: Mutex<HashMap<(String, String), String>>,
    workers: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Shared>,
}

impl AppState {
    /// `workers` bounds concurrent compute (at least 1).
    pub fn new(models: Models, workers: usize) -> portraitgan::Result<Self> {
        let mut hashes = HashMap::new();
        for (id, s) in &models.styles {
            hashes.insert(id.clone(), (s.generator.content_hash()?, s.basis.content_hash()?));
        }
        Ok(Self {
            inner: Arc::new(Shared {
                models,
                hashes,
                jobs: RwLock::new(JobTable::default()),
                inflight: Mutex::new(HashMap::new()),
                workers: Arc::new(Semaphore::new(workers.max(1))),
            }),
        })
    }

    fn style(&self, id: &str) -> Result<&StyleModel, ApiError> {
        self.inner
            .models
            .styles
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown style `{id}`")))
    }

    fn resolution(&self) -> usize {
        self.inner.models.encoder_w.config().resolution
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.inner.jobs.read().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<portraitgan::Error> for ApiError {
    fn from(e: portraitgan::Error) -> Self {
        use portraitgan::Error as E;
        let status = match e {
            E::StyleMismatch { .. } => StatusCode::CONFLICT,
            E::InvalidParameter(_) | E::InvalidImage(_) | E::InvalidCode(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleInfo {
    pub style_id: String,
    pub truncation_psi: f64,
    pub layer_count: usize,
    pub default_mix_indices: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StylizeRequest {
    pub image_png_b64: String,
    pub style_id: String,
    pub psi: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixMode {
    Noise,
    Reference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixRequest {
    pub image_png_b64: String,
    pub style_id: String,
    pub mode: MixMode,
    pub k: usize,
    pub psi: f64,
    pub seed: Option<u64>,
    pub reference_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceRequest {
    pub image_png_b64: String,
    pub style_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageResponse {
    pub image_png_b64: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

/// Decodes an uploaded PNG, center-crops it to a square and resizes it to
/// the model resolution.
pub fn decode_upload(b64: &str, resolution: usize) -> Result<Image, ApiError> {
    let bytes = B64.decode(b64.trim()).map_err(|e| ApiError::bad_request(format!("invalid base64: {e}")))?;
    let img = Image::from_png_bytes(&bytes).map_err(|e| ApiError::bad_request(format!("invalid png: {e}")))?;
    Ok(center_square(&img, resolution)?)
}

pub fn encode_png(img: &Image) -> Result<String, ApiError> {
    Ok(B64.encode(img.to_png_bytes()?))
}

fn check_psi(psi: f64) -> Result<(), ApiError> {
    if (0.0..=1.0).contains(&psi) {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!("psi {psi} outside [0, 1]")))
    }
}

async fn run_compute<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Shared) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let permit = state
        .inner
        .workers
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "worker pool saturated"))?;
    let shared = state.inner.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        f(&shared)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn styles(State(state): State<AppState>) -> Json<Vec<StyleInfo>> {
    Json(
        state
            .inner
            .models
            .styles
            .values()
            .map(|s| StyleInfo {
                style_id: s.policy.style_id.clone(),
                truncation_psi: s.policy.truncation_psi,
                layer_count: s.generator.layer_count(),
                default_mix_indices: s.policy.default_mix_indices.clone(),
            })
            .collect(),
    )
}

async fn stylize(
    State(state): State<AppState>,
    body: Result<Json<StylizeRequest>, JsonRejection>,
) -> Result<Json<ImageResponse>, ApiError> {
    let Json(req) = body?;
    let mut policy = state.style(&req.style_id)?.policy.clone();
    if let Some(psi) = req.psi {
        check_psi(psi)?;
        policy.truncation_psi = psi;
    }
    let image = decode_upload(&req.image_png_b64, state.resolution())?;
    let style_id = req.style_id.clone();
    let out = run_compute(&state, move |s| {
        let g = &s.models.styles[&style_id].generator;
        Ok(stylize_general(&image, &policy, &s.models.encoder_w, g)?)
    })
    .await?;
    Ok(Json(ImageResponse {
        image_png_b64: encode_png(&out)?,
    }))
}

async fn mix(State(state): State<AppState>, body: Result<Json<MixRequest>, JsonRejection>) -> Result<Json<ImageResponse>, ApiError> {
    let Json(req) = body?;
    let style = state.style(&req.style_id)?;
    let l = style.generator.layer_count();
    if req.k > l {
        return Err(ApiError::bad_request(format!("k = {} outside [0, {l}]", req.k)));
    }
    check_psi(req.psi)?;
    let reference = match req.mode {
        MixMode::Noise => {
            if req.reference_id.is_some() {
                return Err(ApiError::new(StatusCode::CONFLICT, "noise mode takes no reference_id"));
            }
            if req.seed.is_none() {
                return Err(ApiError::bad_request("noise mode needs a seed"));
            }
            None
        }
        MixMode::Reference => {
            let id = req
                .reference_id
                .as_deref()
                .ok_or_else(|| ApiError::bad_request("reference mode needs a reference_id"))?;
            let (ref_style, hash) = id
                .split_once('/')
                .ok_or_else(|| ApiError::bad_request(format!("malformed reference id `{id}`")))?;
            if ref_style != req.style_id {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("reference `{id}` belongs to style `{ref_style}`, not `{}`", req.style_id),
                ));
            }
            let emb = state
                .inner
                .models
                .cache
                .get(ref_style, hash)
                .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown reference `{id}`")))?;
            Some(emb)
        }
    };
    let image = decode_upload(&req.image_png_b64, state.resolution())?;
    let out = run_compute(&state, move |s| {
        let g = &s.models.styles[&req.style_id].generator;
        let content = content_code(&image, req.psi, &s.models.encoder_w, g)?;
        let code = match &reference {
            None => multimodal_code(&content, &MixSpec::noise(req.k, req.psi, req.seed.expect("checked")), g)?,
            Some(emb) => reference_code(&content, emb, req.k, g)?,
        };
        Ok(synthesize(&code, g)?)
    })
    .await?;
    Ok(Json(ImageResponse {
        image_png_b64: encode_png(&out)?,
    }))
}

async fn reference(
    State(state): State<AppState>,
    body: Result<Json<ReferenceRequest>, JsonRejection>,
) -> Result<Json<JobCreated>, ApiError> {
    let Json(req) = body?;
    state.style(&req.style_id)?;
    let image = decode_upload(&req.image_png_b64, state.resolution())?;
    let hash = image_hash(&image);
    let key = (req.style_id.clone(), hash.clone());
    let shared = &state.inner;

    let mut inflight = shared.inflight.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(id) = inflight.get(&key) {
        if state.job(id).is_some_and(|j| !j.status.is_finished()) {
            return Ok(Json(JobCreated { job_id: id.clone() }));
        }
    }
    let job_id = shared.jobs.write().unwrap_or_else(|e| e.into_inner()).create(JobKind::InvertReference);

    let (gen_hash, basis_hash) = &shared.hashes[&req.style_id];
    if let Some(hit) = shared.models.cache.get(&req.style_id, &hash) {
        if &hit.meta.generator_hash == gen_hash && &hit.meta.basis_hash == basis_hash {
            shared.jobs.write().unwrap_or_else(|e| e.into_inner()).update(&job_id, |j| {
                j.status = JobStatus::Done;
                j.progress = 1.0;
                j.result_id = Some(hit.id());
            });
            return Ok(Json(JobCreated { job_id }));
        }
    }
    inflight.insert(key.clone(), job_id.clone());
    drop(inflight);

    let shared = state.inner.clone();
    let id = job_id.clone();
    tokio::spawn(async move {
        let permit = shared.workers.clone().acquire_owned().await;
        let worker = shared.clone();
        let jid = id.clone();
        let result = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            let set = |f: &dyn Fn(&mut Job)| worker.jobs.write().unwrap_or_else(|e| e.into_inner()).update(&jid, f);
            set(&|j| j.status = JobStatus::Running);
            let style = &worker.models.styles[&key.0];
            let iters = worker.models.invert.iterations.max(1) as f64;
            let out = embed_reference(
                &image,
                &key.0,
                &style.generator,
                &style.basis,
                &worker.models.nets,
                &worker.models.invert,
                &worker.models.cache,
                |t, _| set(&|j| j.progress = t as f64 / iters),
            );
            match out {
                Ok((emb, steps)) => set(&|j| {
                    j.status = JobStatus::Done;
                    j.progress = 1.0;
                    j.iterations = steps;
                    j.result_id = Some(emb.id());
                }),
                Err(e) => {
                    let msg = e.to_string();
                    set(&|j| {
                        j.status = JobStatus::Failed;
                        j.error = Some(msg.clone());
                    })
                }
            }
            worker.inflight.lock().unwrap_or_else(|e| e.into_inner()).remove(&key);
        })
        .await;
        if let Err(e) = result {
            let msg = e.to_string();
            shared.jobs.write().unwrap_or_else(|e| e.into_inner()).update(&id, |j| {
                j.status = JobStatus::Failed;
                j.error = Some(msg);
            });
        }
    });
    Ok(Json(JobCreated { job_id }))
}

async fn job(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<Job>, ApiError> {
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job `{id}`")))
}

const PLACEHOLDER: &str = "<!doctype html><title>portraitgan studio</title>\
<p>No frontend bundle configured. The API is under <code>/api</code>.</p>";

/// API routes plus the frontend bundle (or a placeholder page) at `/`.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/styles", get(styles))
        .route("/api/stylize", post(stylize))
        .route("/api/mix", post(mix))
        .route("/api/reference", post(reference))
        .route("/api/jobs/{id}", get(job))
        .with_state(state);
    match static_dir {
        Some(dir) if dir.is_dir() => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        _ => api.route("/", get(|| async { Html(PLACEHOLDER) })),
    }
}

pub async fn serve(state: AppState, host: &str, port: u16, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bad address {host}:{port}: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("studio listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await
}
