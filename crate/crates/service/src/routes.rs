use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use futures_util::stream::{self, Stream, StreamExt};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::app::App;
use crate::error::ApiError;
use crate::schema::*;

pub fn router(app: Arc<App>) -> Router {
    let api = Router::new()
        .route("/v1/decide", post(decide))
        .route("/v1/feedback", post(feedback))
        .route("/v1/pending", get(pending))
        .route("/v1/state", get(state))
        .route("/v1/thresholds", put(thresholds))
        .route("/v1/events", get(events))
        .route_layer(middleware::from_fn_with_state(app.clone(), auth));
    Router::new().route("/v1/health", get(health)).merge(api).with_state(app)
}

async fn auth(State(app): State<Arc<App>>, request: Request, next: Next) -> Response {
    if let Some(token) = &app.config().bearer_token {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or invalid bearer token")
                .into_response();
        }
    }
    next.run(request).await
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "schema_version": SCHEMA_VERSION }))
}

async fn decide(State(app): State<Arc<App>>, body: Bytes) -> Result<Json<DecideResponse>, ApiError> {
    let request: DecideRequest = parse(&body)?;
    Ok(Json(app.decide(&request)?))
}

async fn feedback(State(app): State<Arc<App>>, body: Bytes) -> Result<Json<FeedbackResponse>, ApiError> {
    let request: FeedbackRequest = parse(&body)?;
    Ok(Json(app.feedback(&request).await?))
}

async fn pending(State(app): State<Arc<App>>) -> Result<Json<Vec<PendingEscalation>>, ApiError> {
    Ok(Json(app.pending()?))
}

async fn state(State(app): State<Arc<App>>) -> Json<StateView> {
    Json(app.state())
}

async fn thresholds(State(app): State<Arc<App>>, body: Bytes) -> Result<Json<StateView>, ApiError> {
    let request: ThresholdsRequest = parse(&body)?;
    Ok(Json(app.set_thresholds(&request).await?))
}

#[derive(Debug, Deserialize)]
struct EventsQuery {
    since: Option<u64>,
}

async fn events(
    State(app): State<Arc<App>>,
    Query(query): Query<EventsQuery>,
    headers: HeaderMap,
) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let last_id = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse().ok());
    let since = query.since.or(last_id).unwrap_or(0);
    let (backlog, rx) = app.subscribe(since);
    let last = backlog.last().map_or(since, |e| e.seq);
    let live = stream::unfold((rx, last), |(mut rx, last)| async move {
        loop {
            match rx.recv().await {
                Ok(event) if event.seq <= last => continue,
                Ok(event) => {
                    let seq = event.seq;
                    return Some((event, (rx, seq)));
                }
                Err(RecvError::Lagged(n)) => {
                    tracing::warn!(skipped = n, "event subscriber lagged");
                    continue;
                }
                Err(RecvError::Closed) => return None,
            }
        }
    });
    let stream = stream::iter(backlog).chain(live).map(|event| Ok(to_sse(&event)));
    Sse::new(stream).keep_alive(KeepAlive::default())
}

fn to_sse(event: &Event) -> SseEvent {
    SseEvent::default().id(event.seq.to_string()).event(event.kind.as_str()).data(event.data.to_string())
}
