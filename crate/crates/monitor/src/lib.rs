//! HTTP front end for a [`MetricStore`].
//!
//! - `GET /metrics?source=&kind=&from=&to=` returns matching events as a JSON array.
//! - `GET /metrics/stream` is a server-sent event stream of new events; takes the same filter.
//! - `POST /control` accepts a control command and returns the ack.
//! - `POST /ingest` accepts one metric event.
//! - `GET /workers` lists workers currently joined.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use asyncfl_core::monitor::{MetricFilter, MetricStore};
use asyncfl_core::server::ControlAck;
use asyncfl_core::wire::{ControlCommand, MetricEvent};
use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use serde::Serialize;
use tokio::sync::broadcast;
use tower_http::cors::CorsLayer;

/// Capacity of the live broadcast channel. Slow stream clients skip
/// what they missed rather than hold the writer up.
pub const STREAM_CAPACITY: usize = 4096;

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<MetricStore>>,
    tx: broadcast::Sender<MetricEvent>,
}

impl AppState {
    /// Hooks a broadcast sink into `store`. Every event accepted from now on,
    /// from any writer, reaches stream clients.
    pub fn attach(store: Arc<Mutex<MetricStore>>) -> Self {
        let (tx, _) = broadcast::channel(STREAM_CAPACITY);
        let sink = tx.clone();
        store.lock().expect("monitor lock").add_sink(move |ev| {
            // no receivers is fine
            let _ = sink.send(ev.clone());
        });
        Self { store, tx }
    }

    pub fn store(&self) -> Arc<Mutex<MetricStore>> {
        Arc::clone(&self.store)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/metrics", get(query_metrics))
        .route("/metrics/stream", get(stream_metrics))
        .route("/control", post(control))
        .route("/ingest", post(ingest))
        .route("/workers", get(workers))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Serves until the process exits.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, state).await
}

/// Serves on an already bound listener.
pub async fn serve_on(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    tracing::info!(addr = %listener.local_addr()?, "monitor listening");
    axum::serve(listener, router(state)).await
}

async fn query_metrics(
    State(state): State<AppState>,
    Query(filter): Query<MetricFilter>,
) -> Json<Vec<MetricEvent>> {
    Json(state.store.lock().expect("monitor lock").query(&filter))
}

async fn stream_metrics(
    State(state): State<AppState>,
    Query(filter): Query<MetricFilter>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.tx.subscribe();
    let stream = futures::stream::unfold((rx, filter), |(mut rx, filter)| async move {
        loop {
            match rx.recv().await {
                Ok(ev) if filter.matches(&ev) => {
                    let event = Event::default()
                        .event(ev.kind.as_str())
                        .json_data(&ev)
                        .expect("metric events serialize");
                    return Some((Ok(event), (rx, filter)));
                }
                Ok(_) => continue,
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!(skipped = n, "stream client lagged");
                    continue;
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

async fn control(State(state): State<AppState>, Json(cmd): Json<ControlCommand>) -> impl IntoResponse {
    let ack = state.store.lock().expect("monitor lock").control(cmd);
    let status = match ack {
        ControlAck::Ok => StatusCode::OK,
        ControlAck::Error(_) => StatusCode::CONFLICT,
    };
    (status, Json(ack))
}

#[derive(Serialize)]
struct IngestError {
    error: String,
}

async fn ingest(State(state): State<AppState>, body: Bytes) -> impl IntoResponse {
    match state.store.lock().expect("monitor lock").ingest_bytes(&body) {
        Ok(()) => StatusCode::ACCEPTED.into_response(),
        Err(e) => (StatusCode::BAD_REQUEST, Json(IngestError { error: e.to_string() })).into_response(),
    }
}

async fn workers(State(state): State<AppState>) -> Json<Vec<String>> {
    let store = state.store.lock().expect("monitor lock");
    Json(store.active_workers().map(str::to_string).collect())
}
