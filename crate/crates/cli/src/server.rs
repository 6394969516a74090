//! Annotation HTTP API over a workspace.
//!
//! | method | path                                   | body / response            |
//! |--------|----------------------------------------|----------------------------|
//! | GET    | /api/samples                           | JSON list of [`SampleInfo`] |
//! | GET    | /api/samples/{id}/layer/{layer}        | PNG; layer is image, background, prediction or diff |
//! | GET    | /api/samples/{id}/scribbles            | scribble PNG               |
//! | PUT    | /api/samples/{id}/scribbles            | scribble PNG in, JSON [`SampleInfo`] out |
//!
//! Only capture-stage records are exposed. Scribble writes go through a
//! temp file and rename, one writer per sample; a second concurrent PUT for
//! the same sample gets 409.

use std::collections::HashMap;
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use stagematte::dataset::{Manifest, Record, Role, Workspace, MANIFEST_FILE};
use stagematte::image::{write_file_atomic, Image, ScribbleMap};
use tokio::sync::{Mutex as AsyncMutex, OwnedMutexGuard};
use tower_http::services::ServeDir;

use crate::review::diff_layer;

pub struct AppState {
    root: PathBuf,
    manifest: Mutex<Manifest>,
    pred_dir: Option<PathBuf>,
    static_dir: Option<PathBuf>,
    writers: Mutex<HashMap<String, Arc<AsyncMutex<()>>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub annotated: bool,
    pub annotated_pixels: usize,
    pub has_prediction: bool,
}

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

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

impl AppState {
    pub fn new(ws: Workspace, pred_dir: Option<PathBuf>, static_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(AppState {
            root: ws.root,
            manifest: Mutex::new(ws.manifest),
            pred_dir,
            static_dir,
            writers: Mutex::new(HashMap::new()),
        })
    }

    fn record(&self, id: &str) -> ApiResult<Record> {
        self.manifest
            .lock()
            .expect("manifest lock")
            .get(id)
            .filter(|r| r.role == Role::CaptureStage)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown sample `{id}`")))
    }

    fn prediction_path(&self, id: &str) -> Option<PathBuf> {
        self.pred_dir.as_ref().map(|d| d.join(format!("{id}.png")))
    }

    /// Claims the write slot of a sample, or `None` when a write is in
    /// flight.
    pub fn try_claim(&self, id: &str) -> Option<OwnedMutexGuard<()>> {
        let slot = self
            .writers
            .lock()
            .expect("writer table lock")
            .entry(id.to_string())
            .or_default()
            .clone();
        slot.try_lock_owned().ok()
    }

    fn info(&self, r: &Record) -> ApiResult<SampleInfo> {
        let annotated_pixels = match &r.scribbles {
            Some(p) => ScribbleMap::load_png(self.root.join(p))
                .map_err(ApiError::internal)?
                .annotated_count(),
            None => 0,
        };
        Ok(SampleInfo {
            id: r.id.clone(),
            annotated: annotated_pixels > 0,
            annotated_pixels,
            has_prediction: self.prediction_path(&r.id).is_some_and(|p| p.is_file()),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/api/samples", get(list_samples))
        .route("/api/samples/{id}/layer/{layer}", get(get_layer))
        .route("/api/samples/{id}/scribbles", get(get_scribbles).put(put_scribbles));
    let app = match &state.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn read_file(path: &Path) -> ApiResult<Vec<u8>> {
    tokio::fs::read(path).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ApiError::not_found(format!("{} not found", path.display()))
        } else {
            ApiError::internal(e)
        }
    })
}

async fn list_samples(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<SampleInfo>>> {
    let records: Vec<Record> = state
        .manifest
        .lock()
        .expect("manifest lock")
        .by_role(Role::CaptureStage)
        .cloned()
        .collect();
    let list = records.iter().map(|r| state.info(r)).collect::<ApiResult<Vec<_>>>()?;
    Ok(Json(list))
}

async fn get_layer(
    State(state): State<Arc<AppState>>,
    UrlPath((id, layer)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let r = state.record(&id)?;
    let bytes = match layer.as_str() {
        "image" => read_file(&state.root.join(&r.image)).await?,
        "background" => read_file(&state.root.join(&r.background)).await?,
        "prediction" => match state.prediction_path(&id) {
            Some(p) => read_file(&p).await?,
            None => return Err(ApiError::not_found("server was started without predictions")),
        },
        "diff" => {
            let i = Image::load_png(state.root.join(&r.image)).map_err(ApiError::internal)?;
            let b = Image::load_png(state.root.join(&r.background)).map_err(ApiError::internal)?;
            diff_layer(&i, &b)
                .and_then(|d| d.encode_png())
                .map_err(ApiError::internal)?
        }
        other => return Err(ApiError::not_found(format!("unknown layer `{other}`"))),
    };
    Ok(png(bytes))
}

async fn get_scribbles(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let r = state.record(&id)?;
    let bytes = match &r.scribbles {
        Some(p) => read_file(&state.root.join(p)).await?,
        None => {
            let (w, h) = Image::load_png(state.root.join(&r.image))
                .map_err(ApiError::internal)?
                .dims();
            ScribbleMap::unlabeled(w, h)
                .and_then(|m| m.encode_png())
                .map_err(ApiError::internal)?
        }
    };
    Ok(png(bytes))
}

async fn put_scribbles(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SampleInfo>> {
    let r = state.record(&id)?;
    let _slot = state
        .try_claim(&id)
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, format!("a scribble write for `{id}` is in progress")))?;
    let map = ScribbleMap::decode_png(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid scribble png: {e}")))?;
    let expected = Image::load_png(state.root.join(&r.image))
        .map_err(ApiError::internal)?
        .dims();
    if map.dims() != expected {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!(
                "scribble size mismatch: expected {}x{}, received {}x{}",
                expected.0,
                expected.1,
                map.width(),
                map.height()
            ),
        ));
    }
    let rel = r
        .scribbles
        .clone()
        .unwrap_or_else(|| format!("data/{id}/scribbles.png"));
    let path = state.root.join(&rel);
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(ApiError::internal)?;
    }
    // The received bytes are stored as-is so GET returns them unchanged.
    write_file_atomic(&path, &body).map_err(ApiError::internal)?;
    if r.scribbles.is_none() {
        let mut m = state.manifest.lock().expect("manifest lock");
        let mut next = m.clone();
        if let Some(rec) = next.get_mut(&id) {
            rec.scribbles = Some(rel);
        }
        next.save(state.root.join(MANIFEST_FILE)).map_err(ApiError::internal)?;
        *m = next;
    }
    Ok(Json(SampleInfo {
        annotated: map.annotated_count() > 0,
        annotated_pixels: map.annotated_count(),
        has_prediction: state.prediction_path(&id).is_some_and(|p| p.is_file()),
        id,
    }))
}
