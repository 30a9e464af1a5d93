//! HTTP/JSON front end over [`Service`].

use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::services::ServeDir;

use crate::service::{ContactRow, Service, ServiceError, Window};

/// Upper bound on an uploaded capture.
pub const MAX_UPLOAD: usize = 512 << 20;

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Rejected(_) | ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            log::error!("{}", self.0);
        }
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    svc: Arc<Service>,
    f: impl FnOnce(&Service) -> Result<T, ServiceError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(ServiceError::Setup(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn ingest(State(svc): State<Arc<Service>>, mut form: Multipart) -> ApiResult<Response> {
    let mut data = None;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?
    {
        if field.file_name().is_some() || field.name() == Some("file") {
            data = Some(
                field
                    .bytes()
                    .await
                    .map_err(|e| ServiceError::BadRequest(e.to_string()))?,
            );
            break;
        }
    }
    let data = data.ok_or_else(|| ServiceError::BadRequest("multipart body has no file field".into()))?;
    let (summary, fresh) = blocking(svc, move |s| s.ingest(&data)).await?;
    let status = if fresh { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(summary)).into_response())
}

#[derive(Deserialize)]
struct SearchQuery {
    #[serde(default)]
    q: String,
}

async fn search(State(svc): State<Arc<Service>>, Query(p): Query<SearchQuery>) -> ApiResult<Response> {
    let found = blocking(svc, move |s| s.search(&p.q)).await?;
    Ok(Json(found).into_response())
}

#[derive(Deserialize)]
struct ContactsQuery {
    start: Option<f64>,
    end: Option<f64>,
    max_distance: Option<f64>,
}

async fn contacts(
    State(svc): State<Arc<Service>>,
    Path(bucket): Path<u64>,
    Query(p): Query<ContactsQuery>,
) -> ApiResult<Response> {
    let window = Window {
        start_s: p.start,
        end_s: p.end,
    };
    let rows = blocking(svc, move |s| s.get_contacts(bucket, window, p.max_distance)).await?;
    Ok(Json(rows.iter().map(ContactRow::from).collect::<Vec<_>>()).into_response())
}

#[derive(Deserialize)]
struct PathQuery {
    site: String,
    start: Option<f64>,
    end: Option<f64>,
}

async fn path(
    State(svc): State<Arc<Service>>,
    Path(bucket): Path<u64>,
    Query(p): Query<PathQuery>,
) -> ApiResult<Response> {
    let window = Window {
        start_s: p.start,
        end_s: p.end,
    };
    let pts = blocking(svc, move |s| s.get_path(bucket, &p.site, window)).await?;
    Ok(Json(pts).into_response())
}

async fn erase(State(svc): State<Arc<Service>>, Path(bucket): Path<u64>) -> ApiResult<Response> {
    let receipt = blocking(svc, move |s| s.erase_device(bucket)).await?;
    Ok(Json(receipt).into_response())
}

async fn sites(State(svc): State<Arc<Service>>) -> Json<Vec<String>> {
    Json(svc.site_ids())
}

async fn site_map(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(svc.site_map(&id)?).into_response())
}

async fn require_token(State(svc): State<Arc<Service>>, req: Request, next: Next) -> Response {
    if let Some(token) = &svc.config().bearer_token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return (
                StatusCode::UNAUTHORIZED,
                Json(serde_json::json!({ "error": "missing or wrong bearer token" })),
            )
                .into_response();
        }
    }
    next.run(req).await
}

/// API routes plus, when configured, the console's static files.
pub fn router(svc: Arc<Service>) -> Router {
    let api = Router::new()
        .route("/captures", post(ingest))
        .route("/devices", get(search))
        .route("/devices/{bucket}", delete(erase))
        .route("/devices/{bucket}/contacts", get(contacts))
        .route("/devices/{bucket}/path", get(path))
        .route("/sites", get(sites))
        .route("/sites/{id}/map", get(site_map))
        .layer(middleware::from_fn_with_state(svc.clone(), require_token))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(svc.clone());
    match &svc.config().static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(svc: Arc<Service>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc)).await
}
