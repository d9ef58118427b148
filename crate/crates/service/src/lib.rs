//! JSON-over-HTTP front end of the label queue.
//!
//! | method | path              | body                                          |
//! |--------|-------------------|-----------------------------------------------|
//! | GET    | `/api/status`     |                                               |
//! | POST   | `/api/items/next` | `{"count": 2, "session": "alice"}`            |
//! | POST   | `/api/labels`     | `{"tuple_id": "t1", "preference": 1 \| 2 \| "skip", "session": "alice"}` |
//!
//! The session may also come from the `X-Balpm-Session` header. When a token
//! is configured every request must carry it in `X-Balpm-Token`. Errors are
//! `{"code": ..., "message": ...}` with status 400, 401, 404, 409 or 500.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use balpm_core::label_service::{Ack, LabelQueue, LabelServiceError, PendingItem, Preference, Status};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const TOKEN_HEADER: &str = "x-balpm-token";
pub const SESSION_HEADER: &str = "x-balpm-session";
/// Upper bound on `count` in one lease request.
pub const MAX_LEASE: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
}

struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self(status, ApiError { code: code.into(), message: message.into() })
    }
}

impl From<LabelServiceError> for Failure {
    fn from(e: LabelServiceError) -> Self {
        let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(error = %e, "label queue failure");
        }
        Self::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NextRequest {
    pub count: usize,
    #[serde(default)]
    pub session: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NextResponse {
    pub items: Vec<PendingItem>,
    pub status: Status,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRequest {
    pub tuple_id: String,
    pub preference: Preference,
    #[serde(default)]
    pub session: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelResponse {
    pub ack: Ack,
    pub status: Status,
}

#[derive(Clone)]
struct AppState {
    queue: Arc<LabelQueue>,
    token: Option<Arc<str>>,
}

pub fn router(queue: Arc<LabelQueue>, token: Option<String>) -> Router {
    let state = AppState { queue, token: token.map(Arc::from) };
    Router::new()
        .route("/api/status", get(status))
        .route("/api/items/next", post(next_items))
        .route("/api/labels", post(submit_label))
        .route_layer(middleware::from_fn_with_state(state.clone(), check_token))
        .with_state(state)
}

/// Serve `router` on `addr` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "label service listening");
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}

async fn check_token(State(st): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &st.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(&**expected) {
            return Failure::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong token").into_response();
        }
    }
    next.run(req).await
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure::new(StatusCode::BAD_REQUEST, "invalid_request", e.to_string()))
}

fn session(body: Option<String>, headers: &HeaderMap) -> Option<String> {
    body.or_else(|| headers.get(SESSION_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
}

/// Queue operations lock a mutex and may fsync, so they leave the async
/// workers alone.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, Failure> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Failure::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))
}

async fn status(State(st): State<AppState>) -> Result<Json<Status>, Failure> {
    Ok(Json(blocking(move || st.queue.status()).await?))
}

async fn next_items(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<NextResponse>, Failure> {
    let req: NextRequest = parse(&body)?;
    if req.count == 0 || req.count > MAX_LEASE {
        return Err(Failure::new(StatusCode::BAD_REQUEST, "invalid_request", format!("count must be in 1..={MAX_LEASE}")));
    }
    let session = session(req.session, &headers);
    let resp = blocking(move || {
        let items = st.queue.next_items(session.as_deref(), req.count)?;
        Ok::<_, LabelServiceError>(NextResponse { items, status: st.queue.status() })
    })
    .await??;
    Ok(Json(resp))
}

async fn submit_label(State(st): State<AppState>, headers: HeaderMap, body: Bytes) -> Result<Json<LabelResponse>, Failure> {
    let req: LabelRequest = parse(&body)?;
    let session = session(req.session, &headers);
    let resp = blocking(move || {
        let ack = st.queue.submit_label(&req.tuple_id, req.preference, session.as_deref())?;
        Ok::<_, LabelServiceError>(LabelResponse { ack, status: st.queue.status() })
    })
    .await??;
    Ok(Json(resp))
}
