//! JSON HTTP API over a loaded model.
//!
//! Model parameters are read-only after load; the only shared mutable state
//! is the LRU bundle store that hands out opaque ids for encoded, sampled and
//! edited latents.

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::editing::{self, EditMode, EditSelection};
use crate::error::Error;
use crate::geometry::{Point, PointCloud};
use crate::latent::{self, LatentBundle, PartDims};
use crate::networks::{self, DecodedShape, ModelParams};

pub const DEFAULT_STORE_CAPACITY: usize = 256;
/// Upper bound on shapes returned by one `/sample` or `/interpolate` call.
pub const MAX_SHAPES_PER_REQUEST: usize = 256;

pub struct ServiceState {
    model: ModelParams,
    category: Option<String>,
    bundles: Mutex<LruCache<String, LatentBundle>>,
}

impl ServiceState {
    pub fn new(model: ModelParams, category: Option<String>, capacity: usize) -> Self {
        let capacity = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        Self { model, category, bundles: Mutex::new(LruCache::new(capacity)) }
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    fn store(&self, bundle: LatentBundle) -> String {
        let id = uuid::Uuid::new_v4().simple().to_string();
        self.bundles.lock().expect("bundle store poisoned").put(id.clone(), bundle);
        id
    }

    fn fetch(&self, id: &str) -> Result<LatentBundle, ApiError> {
        self.bundles
            .lock()
            .expect("bundle store poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown bundle id", id))
    }
}

/// Rounds to 6 significant digits, the precision carried over the wire.
pub fn round6(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.5e}").parse().expect("formatted float parses")
}

fn round_all<const N: usize>(v: [f64; N]) -> [f64; N] {
    v.map(round6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitivePayload {
    pub alpha: [f64; 3],
    pub epsilon: [f64; 2],
    pub taper: [f64; 2],
    pub q: [f64; 4],
    pub t: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapePayload {
    pub points: Vec<Point>,
    pub part_index: Vec<usize>,
    pub primitives: Vec<PrimitivePayload>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bundle_id: Option<String>,
}

impl ShapePayload {
    pub fn from_shape(shape: &DecodedShape, bundle_id: Option<String>) -> Self {
        let (cloud, part_index) = shape.assembled();
        let points = cloud.points().iter().map(|&p| round_all(p)).collect();
        let primitives = shape
            .primitives()
            .iter()
            .map(|(sq, pose)| PrimitivePayload {
                alpha: round_all(sq.alpha),
                epsilon: round_all(sq.epsilon),
                taper: round_all(sq.taper),
                q: round_all(pose.q()),
                t: round_all(pose.t()),
            })
            .collect();
        Self { points, part_index, primitives, bundle_id }
    }

    fn is_finite(&self) -> bool {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        self.points.iter().all(|p| finite(p))
            && self.primitives.iter().all(|p| {
                finite(&p.alpha) && finite(&p.epsilon) && finite(&p.taper) && finite(&p.q) && finite(&p.t)
            })
    }
}

/// Decodes to a payload, registering `bundle` in the store. Requests are
/// validated before this point, so decode failures and non-finite outputs are
/// internal errors.
fn respond(state: &ServiceState, bundle: LatentBundle) -> Result<ShapePayload, ApiError> {
    let shape = networks::decode_bundle(&state.model, &bundle)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string()))?;
    let payload = ShapePayload::from_shape(&shape, None);
    if !payload.is_finite() {
        return Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", "model produced non-finite output"));
    }
    Ok(ShapePayload { bundle_id: Some(state.store(bundle)), ..payload })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetaResponse {
    #[serde(rename = "M")]
    pub parts: usize,
    #[serde(rename = "D_z")]
    pub latent_dim: usize,
    pub part_dims: PartDims,
    pub category: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ShapesResponse {
    pub shapes: Vec<ShapePayload>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub bundle_id: String,
    pub shape: ShapePayload,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRequest {
    seed: u64,
    n: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodeRequest {
    points: Vec<Point>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MixRequest {
    target_id: String,
    reference_id: String,
    parts: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ResampleRequest {
    bundle_id: String,
    parts: Vec<usize>,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InterpolateRequest {
    id_a: String,
    id_b: String,
    weights: Vec<f64>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        Self { status, error: error.to_string(), detail: detail.into() }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "malformed request", detail)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::PartIndex { .. } => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid part index", e.to_string()),
            Error::InvalidParameter(_) | Error::Empty(_) => Self::bad_request(e.to_string()),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.error, detail: self.detail })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

fn check_count(n: usize) -> Result<(), ApiError> {
    if n > MAX_SHAPES_PER_REQUEST {
        return Err(ApiError::bad_request(format!("at most {MAX_SHAPES_PER_REQUEST} shapes per request, got {n}")));
    }
    Ok(())
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(
    state: &Arc<ServiceState>,
    f: impl FnOnce(&ServiceState) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string()))?
}

async fn meta(State(state): State<Arc<ServiceState>>) -> Json<MetaResponse> {
    let c = state.model.config();
    Json(MetaResponse {
        parts: c.parts,
        latent_dim: c.latent_dim,
        part_dims: c.part_dims,
        category: state.category.clone(),
    })
}

async fn sample(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<ShapesResponse> {
    let req: SampleRequest = parse(&body)?;
    check_count(req.n)?;
    let shapes = blocking(&state, move |s| {
        let z = latent::sample_prior(req.seed, req.n, s.model.config().latent_dim);
        z.iter().map(|z| respond(s, networks::split(&s.model, z)?)).collect()
    })
    .await?;
    Ok(Json(ShapesResponse { shapes }))
}

async fn encode(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<EncodeResponse> {
    let req: EncodeRequest = parse(&body)?;
    if req.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ApiError::bad_request("points must be finite"));
    }
    let cloud = PointCloud::new(req.points)?;
    blocking(&state, move |s| {
        let bundle = editing::encode_shape(&s.model, &cloud, true, 0)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", e.to_string()))?;
        let shape = respond(s, bundle)?;
        let bundle_id = shape.bundle_id.clone().expect("stored bundle");
        Ok(Json(EncodeResponse { bundle_id, shape }))
    })
    .await
}

async fn mix(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<ShapePayload> {
    let req: MixRequest = parse(&body)?;
    blocking(&state, move |s| {
        let target = s.fetch(&req.target_id)?;
        let reference = s.fetch(&req.reference_id)?;
        let sel = EditSelection::new(req.parts, EditMode::Mix);
        Ok(Json(respond(s, editing::mix_bundles(&target, &reference, &sel, false)?)?))
    })
    .await
}

async fn resample(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<ShapePayload> {
    let req: ResampleRequest = parse(&body)?;
    blocking(&state, move |s| {
        let bundle = s.fetch(&req.bundle_id)?;
        let sel = EditSelection::new(req.parts, EditMode::Resample);
        Ok(Json(respond(s, editing::resample_bundle(&s.model, &bundle, &sel, req.seed)?)?))
    })
    .await
}

async fn interpolate(State(state): State<Arc<ServiceState>>, body: Bytes) -> ApiResult<ShapesResponse> {
    let req: InterpolateRequest = parse(&body)?;
    check_count(req.weights.len())?;
    let shapes = blocking(&state, move |s| {
        let a = s.fetch(&req.id_a)?;
        let b = s.fetch(&req.id_b)?;
        if a.num_parts() != b.num_parts() {
            return Err(Error::Shape("bundles have different part counts".into()).into());
        }
        if let Some(w) = req.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(ApiError::bad_request(format!("interpolation weight {w} outside [0, 1]")));
        }
        req.weights.iter().map(|&w| respond(s, a.lerp(&b, w)?)).collect()
    })
    .await?;
    Ok(Json(ShapesResponse { shapes }))
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/meta", get(meta))
        .route("/sample", post(sample))
        .route("/encode", post(encode))
        .route("/mix", post(mix))
        .route("/resample", post(resample))
        .route("/interpolate", post(interpolate))
        .with_state(state)
}

/// Serves the API until the process is stopped.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
