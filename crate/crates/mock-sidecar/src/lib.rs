//! The mock world served over the sidecar wire protocol, so the HTTP client
//! can be exercised end to end without a real model.

use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use distill_core::backend::wire::*;
use distill_core::backend::{Backend, BackendError, LatentMap, MockBackend, MockWorld, PromptSpec};
use ndarray::Array3;

/// Reported scheduler length; the mock has no scheduler.
pub const T_TOTAL: u32 = 1000;

const LABEL_PREFIX: &str = "An image of ";

struct ApiError(StatusCode, String);

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let status = match e {
            BackendError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            BackendError::ShapeMismatch(_) => StatusCode::UNPROCESSABLE_ENTITY,
            BackendError::InvalidRequest(_) | BackendError::Protocol(_) => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn prompt_from_wire(prompt: Option<String>) -> Result<PromptSpec, ApiError> {
    match prompt {
        None => Ok(PromptSpec::Null),
        Some(text) => {
            let label = text.strip_prefix(LABEL_PREFIX).unwrap_or(&text);
            PromptSpec::label(label).map_err(ApiError::from)
        }
    }
}

fn latent_from_wire(p: &TensorPayload) -> Result<LatentMap, ApiError> {
    let data: Array3<f32> = p.to_latent_array()?;
    Ok(LatentMap::new(data, 1, "wire")?)
}

async fn health() -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        model_ids: vec!["mock-world".into()],
        downsample_factor: 1,
        t_total: T_TOTAL,
    })
}

async fn encode(State(b): State<Arc<MockBackend>>, Json(req): Json<EncodeRequest>) -> ApiResult<EncodeResponse> {
    let img = decode_png(&req.image)?;
    if img.width() < 2 || img.height() < 2 {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            format!("image {}x{} is too small", img.width(), img.height()),
        ));
    }
    let latent = b.encode(&img, "wire")?;
    Ok(Json(EncodeResponse {
        latent: TensorPayload::from_array(&latent.data),
        downsample_factor: latent.downsample_factor,
    }))
}

async fn loss_map(State(b): State<Arc<MockBackend>>, Json(req): Json<LossMapRequest>) -> ApiResult<LossMapResponse> {
    let latent = latent_from_wire(&req.latent)?;
    let prompt = prompt_from_wire(req.prompt)?;
    for d in &req.draws {
        d.validate()
            .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    }
    let maps = b.loss_maps(&latent, &prompt, &req.draws)?;
    let (h, w) = (latent.height(), latent.width());
    let mut values = Vec::with_capacity(maps.len() * h * w);
    for m in &maps {
        values.extend(m.data.iter().copied());
    }
    Ok(Json(LossMapResponse {
        loss_maps: TensorPayload::from_slice(vec![maps.len(), h, w], &values),
    }))
}

async fn features(State(b): State<Arc<MockBackend>>, Json(req): Json<FeaturesRequest>) -> ApiResult<FeaturesResponse> {
    let latents = req.latents.iter().map(latent_from_wire).collect::<Result<Vec<_>, _>>()?;
    let prompt = prompt_from_wire(req.prompt)?;
    let out = b.features(&latents, &prompt, req.t, &req.layer)?;
    Ok(Json(FeaturesResponse {
        features: out
            .iter()
            .map(|f| TensorPayload::from_slice(vec![f.values.len()], &f.values))
            .collect(),
        metadata: Some(serde_json::json!({"t": req.t, "convention": "passthrough"})),
    }))
}

async fn teacher_logits(
    State(b): State<Arc<MockBackend>>,
    Json(req): Json<TeacherLogitsRequest>,
) -> ApiResult<TeacherLogitsResponse> {
    let world = b.world();
    let logits = req
        .images
        .iter()
        .map(|data| {
            let img = decode_png(data)?;
            let z = world.color_logits(&img);
            Ok(TensorPayload::from_slice(vec![z.len()], &z))
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(Json(TeacherLogitsResponse {
        logits,
        class_names: world.classes.iter().map(|c| c.name.clone()).collect(),
    }))
}

pub fn router(world: MockWorld) -> Result<Router, BackendError> {
    let backend = Arc::new(MockBackend::new(world)?);
    Ok(Router::new()
        .route(HEALTH_PATH, get(health))
        .route(ENCODE_PATH, post(encode))
        .route(LOSS_MAP_PATH, post(loss_map))
        .route(FEATURES_PATH, post(features))
        .route(TEACHER_LOGITS_PATH, post(teacher_logits))
        .layer(axum::extract::DefaultBodyLimit::max(1 << 30))
        .with_state(backend))
}

/// Binds `addr`, returns the bound address and serves on a background
/// runtime thread for the rest of the process.
pub fn spawn(world: MockWorld, addr: &str) -> std::io::Result<std::net::SocketAddr> {
    let app = router(world).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let listener = std::net::TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()
            .expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            axum::serve(listener, app).await.expect("server");
        });
    });
    Ok(local)
}
