//! HTTP/JSON binding of the public zone API.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use super::auth::Principal;
use super::{CaseFilter, CaseKind, DecisionRequest, GatewayError, PublicZone, SubmitRequest};
use crate::codec::to_canonical_json;

fn json_response<T: Serialize>(status: StatusCode, body: &T) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], to_canonical_json(body)).into_response()
}

impl IntoResponse for GatewayError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({ "error": self.code(), "message": self.to_string() });
        match &self {
            GatewayError::SignatureInvalid(reason) => body["reason"] = json!(reason),
            GatewayError::HashMismatch { claimed, computed } => {
                body["claimed"] = json!(claimed);
                body["computed"] = json!(computed);
            }
            GatewayError::NotReleased(state) | GatewayError::InvalidState(state) => body["state"] = json!(state),
            _ => {}
        }
        json_response(status, &body)
    }
}

type ApiResult = Result<Response, GatewayError>;

/// Runs a blocking zone operation on the blocking pool.
async fn blocking<T, F>(zone: Arc<PublicZone>, f: F) -> Result<T, GatewayError>
where
    T: Send + 'static,
    F: FnOnce(&PublicZone) -> Result<T, GatewayError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&zone)).await.map_err(|e| GatewayError::Internal(e.to_string()))?
}

async fn principal(zone: &Arc<PublicZone>, headers: &HeaderMap) -> Result<Principal, GatewayError> {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).map(str::to_owned);
    blocking(zone.clone(), move |z| z.authenticate(auth.as_deref())).await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, GatewayError> {
    serde_json::from_slice(body).map_err(|e| GatewayError::BadRequest(e.to_string()))
}

async fn submit(State(zone): State<Arc<PublicZone>>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let p = principal(&zone, &headers).await?;
    let req: SubmitRequest = parse_body(&body)?;
    let receipt = blocking(zone, move |z| z.submit(&p, req)).await?;
    Ok(json_response(StatusCode::CREATED, &receipt))
}

async fn job_status(State(zone): State<Arc<PublicZone>>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let p = principal(&zone, &headers).await?;
    let job = blocking(zone, move |z| z.status(&p, &id)).await?;
    Ok(json_response(StatusCode::OK, &job))
}

async fn job_results(State(zone): State<Arc<PublicZone>>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult {
    let p = principal(&zone, &headers).await?;
    let download = blocking(zone, move |z| z.fetch_results(&p, &id)).await?;
    Ok(json_response(StatusCode::OK, &download))
}

async fn list_cases(
    State(zone): State<Arc<PublicZone>>,
    headers: HeaderMap,
    Path(kind): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let p = principal(&zone, &headers).await?;
    let kind: CaseKind = kind.parse()?;
    let filter = match q.get("state").map(String::as_str) {
        None | Some("open") => CaseFilter::Open,
        Some("decided") => CaseFilter::Decided,
        Some("all") => CaseFilter::All,
        Some(other) => return Err(GatewayError::BadRequest(format!("unknown state filter {other:?}"))),
    };
    let cases = blocking(zone, move |z| z.list_cases(&p, kind, filter)).await?;
    Ok(json_response(StatusCode::OK, &cases))
}

async fn get_case(
    State(zone): State<Arc<PublicZone>>,
    headers: HeaderMap,
    Path((kind, id)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult {
    let p = principal(&zone, &headers).await?;
    let kind: CaseKind = kind.parse()?;
    let full = q.get("full").is_some_and(|v| v == "1" || v == "true");
    let case = blocking(zone, move |z| z.get_case(&p, kind, &id, full)).await?;
    Ok(json_response(StatusCode::OK, &case))
}

async fn decide(
    State(zone): State<Arc<PublicZone>>,
    headers: HeaderMap,
    Path((kind, id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult {
    let p = principal(&zone, &headers).await?;
    let kind: CaseKind = kind.parse()?;
    let req: DecisionRequest = parse_body(&body)?;
    let receipt = blocking(zone, move |z| match kind {
        CaseKind::Input => z.decide_input(&p, &id, req),
        CaseKind::Output => z.decide_output(&p, &id, req),
    })
    .await?;
    Ok(json_response(StatusCode::OK, &receipt))
}

async fn issue_nonce(State(zone): State<Arc<PublicZone>>, headers: HeaderMap) -> ApiResult {
    let p = principal(&zone, &headers).await?;
    let nonce = blocking(zone, move |z| z.request_nonce(&p)).await?;
    Ok(json_response(StatusCode::CREATED, &nonce))
}

pub fn router(zone: Arc<PublicZone>) -> Router {
    // Hex doubles the archive; leave room for the JSON envelope.
    let body_limit = zone.config().max_bundle_bytes.saturating_mul(2).saturating_add(64 * 1024);
    Router::new()
        .route("/v1/jobs", post(submit))
        .route("/v1/jobs/:id", get(job_status))
        .route("/v1/jobs/:id/results", get(job_results))
        .route("/v1/vetting/:kind", get(list_cases))
        .route("/v1/vetting/:kind/:id", get(get_case))
        .route("/v1/vetting/:kind/:id/decision", post(decide))
        .route("/v1/nonces", post(issue_nonce))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(zone)
}

/// Serves the API on `listener` until `shutdown` resolves.
pub async fn serve(
    zone: Arc<PublicZone>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(zone)).with_graceful_shutdown(shutdown).await
}

/// Binds `addr` and serves on a dedicated runtime thread. Returns the bound
/// address and a handle whose drop does not stop the server; send on the
/// returned channel to stop it.
pub fn spawn_server(
    zone: Arc<PublicZone>,
    addr: SocketAddr,
) -> std::io::Result<(SocketAddr, tokio::sync::oneshot::Sender<()>, std::thread::JoinHandle<std::io::Result<()>>)> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let bound = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let handle = std::thread::Builder::new().name("gateway-http".into()).spawn(move || {
        runtime.block_on(serve(zone, listener, async move {
            let _ = rx.await;
        }))
    })?;
    Ok((bound, tx, handle))
}
