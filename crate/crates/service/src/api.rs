//! HTTP + JSON API over a [`RunManager`].

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use groupchat_core::stories::PRESETS;
use serde::Deserialize;
use serde_json::json;

use crate::error::ServiceError;
use crate::feed::{FeedEvent, Viewer};
use crate::manager::{AdvanceRequest, CreateRun, RunEntry, RunManager, SubmitRequest};

pub type AppState = Arc<RunManager>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let code = StatusCode::from_u16(self.status_code()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({ "error": self.to_string() });
        if !self.violations().is_empty() {
            body["violations"] = json!(self.violations());
        }
        (code, Json(body)).into_response()
    }
}

pub fn router(manager: AppState) -> Router {
    Router::new()
        .route("/runs", post(create_run).get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/advance", post(advance))
        .route("/runs/{id}/pending", get(pending))
        .route("/runs/{id}/actions", post(submit))
        .route("/runs/{id}/events", get(events))
        .route("/runs/{id}/log", get(download_log))
        .route("/stories", get(stories))
        .with_state(manager)
}

async fn create_run(State(m): State<AppState>, Json(req): Json<CreateRun>) -> Result<Response, ServiceError> {
    let created = tokio::task::spawn_blocking(move || m.create(req))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn list_runs(State(m): State<AppState>) -> Response {
    Json(json!({ "runs": m.list() })).into_response()
}

async fn get_run(State(m): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    Ok(Json(m.get(&id)?.handle(false)).into_response())
}

async fn advance(
    State(m): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<AdvanceRequest>>,
) -> Result<Response, ServiceError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let entry = m.get(&id)?;
    let worker = entry.advance(req.steps)?;
    if req.wait {
        tokio::task::spawn_blocking(move || worker.join())
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
            .map_err(|_| ServiceError::Internal("run worker panicked".into()))?;
        return Ok(Json(entry.handle(false)).into_response());
    }
    Ok((StatusCode::ACCEPTED, Json(entry.handle(false))).into_response())
}

#[derive(Debug, Deserialize)]
struct TokenQuery {
    token: String,
}

async fn pending(
    State(m): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
) -> Result<Response, ServiceError> {
    let view = m.get(&id)?.pending(&q.token)?;
    Ok(Json(json!({ "pending": view })).into_response())
}

async fn submit(
    State(m): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SubmitRequest>,
) -> Result<Response, ServiceError> {
    m.get(&id)?.submit(&req)?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "accepted": true, "pending_id": req.pending_id }))).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct EventsQuery {
    viewer: Option<String>,
    token: Option<String>,
    after: Option<u64>,
}

fn to_sse(e: &FeedEvent) -> Event {
    Event::default()
        .id(e.seq.to_string())
        .event(e.kind())
        .data(serde_json::to_string(e).expect("events serialize"))
}

/// Server-sent events. Resume with `after=<seq>` or a `Last-Event-ID`
/// header; the stream ends with an `end` event once the run is over.
async fn events(
    State(m): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ServiceError> {
    let entry = m.get(&id)?;
    let viewer = entry.viewer(q.viewer.as_deref(), q.token.as_deref())?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());
    let after = q.after.or(resume).unwrap_or(0);
    Ok(Sse::new(event_stream(entry, viewer, after)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}

struct Cursor {
    entry: Arc<RunEntry>,
    viewer: Viewer,
    after: u64,
    rx: tokio::sync::watch::Receiver<u64>,
    queue: std::collections::VecDeque<Event>,
    done: bool,
}

pub fn event_stream(entry: Arc<RunEntry>, viewer: Viewer, after: u64) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = entry.subscribe();
    let start = Cursor { entry, viewer, after, rx, queue: Default::default(), done: false };
    stream::unfold(start, |mut c| async move {
        loop {
            if let Some(ev) = c.queue.pop_front() {
                return Some((Ok(ev), c));
            }
            if c.done {
                return None;
            }
            c.rx.borrow_and_update();
            let batch = c.entry.events(&c.viewer, c.after);
            c.after = batch.cursor;
            c.queue.extend(batch.events.iter().map(to_sse));
            if batch.complete {
                let status = c.entry.status();
                c.queue.push_back(
                    Event::default()
                        .event("end")
                        .data(json!({ "status": status, "cursor": c.after }).to_string()),
                );
                c.done = true;
            } else if c.queue.is_empty() && c.rx.changed().await.is_err() {
                return None;
            }
        }
    })
}

async fn download_log(State(m): State<AppState>, Path(id): Path<String>) -> Result<Response, ServiceError> {
    let entry = m.get(&id)?;
    let text = tokio::task::spawn_blocking(move || entry.log_text())
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok((
        [
            (header::CONTENT_TYPE, "application/x-ndjson".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{id}.jsonl\"")),
        ],
        text,
    )
        .into_response())
}

async fn stories() -> Response {
    Json(json!({ "presets": PRESETS })).into_response()
}
