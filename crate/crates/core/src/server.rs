//! HTTP service for human annotation.
//!
//! Handlers read the last view published by the engine and submit verdicts
//! to the shared queue; they never touch engine state directly. Every
//! response body carries the view generation, which changes whenever the
//! engine publishes.

use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{Value, json};

use crate::dataset::{CameraId, DatasetManifest, TrackletId};
use crate::eval::BudgetReport;
use crate::labels::{ClusterId, LabelState, Verdict};
use crate::metric::{DistanceCache, ViewClass};
use crate::oracle::{HumanAnswer, QueueError, SharedQueue};
use crate::run::{MetricsRecord, StopReason};

/// What the service shows: an immutable copy of engine state.
#[derive(Debug, Clone)]
pub struct ServiceView {
    pub generation: u64,
    pub iteration: u32,
    pub manifest: Arc<DatasetManifest>,
    pub labels: Arc<LabelState>,
    pub cache: Option<Arc<DistanceCache>>,
    pub budget: BudgetReport,
    pub history: Vec<MetricsRecord>,
    pub stopped: Option<StopReason>,
    /// Verdicts parked because they contradicted known constraints.
    pub review: usize,
}

pub type SharedView = Arc<RwLock<ServiceView>>;

impl ServiceView {
    pub fn shared(manifest: &DatasetManifest) -> SharedView {
        let stripped = manifest.without_identities();
        let labels = LabelState::init(&stripped);
        Arc::new(RwLock::new(Self {
            generation: 0,
            iteration: 0,
            manifest: Arc::new(stripped),
            labels: Arc::new(labels),
            cache: None,
            budget: BudgetReport {
                tp_manual: 0,
                auto_count: 0,
                t_pa: None,
                ar: None,
                gained_tp_ratio: None,
            },
            history: Vec::new(),
            stopped: None,
            review: 0,
        }))
    }
}

pub const TOKEN_HEADER: &str = "x-api-token";

#[derive(Clone)]
pub struct AppState {
    pub view: SharedView,
    pub queue: SharedQueue,
    /// Required value of the token header, if any.
    pub token: Option<Arc<str>>,
}

fn snapshot(state: &AppState) -> ServiceView {
    state.view.read().expect("view lock poisoned").clone()
}

fn generation(state: &AppState) -> u64 {
    state.view.read().expect("view lock poisoned").generation
}

fn error(status: StatusCode, generation: u64, message: impl Into<String>) -> Response {
    (status, Json(json!({ "generation": generation, "error": message.into() }))).into_response()
}

#[derive(Serialize)]
struct TrackletInfo {
    tracklet_id: TrackletId,
    camera_id: CameraId,
    cluster_id: ClusterId,
    image_paths: Vec<String>,
}

fn tracklet_info(view: &ServiceView, index: usize) -> TrackletInfo {
    let t = &view.manifest.tracklets()[index];
    let images = view.manifest.images();
    TrackletInfo {
        tracklet_id: t.tracklet_id,
        camera_id: t.camera_id,
        cluster_id: view.labels.cluster_at(index),
        image_paths: t.images.iter().filter_map(|&i| images[i].image_path.clone()).collect(),
    }
}

fn view_name(v: ViewClass) -> &'static str {
    match v {
        ViewClass::SameView => "same_view",
        ViewClass::CrossView => "cross_view",
    }
}

async fn queue_next(State(state): State<AppState>) -> Response {
    let view = snapshot(&state);
    let (next, pending) = {
        let mut q = state.queue.lock();
        (q.next(Instant::now()), q.pending_len())
    };
    let pair = next.map(|q| {
        json!({
            "pair_id": q.pair_id,
            "view": view_name(q.entry.pair.view),
            "distance": q.entry.distance,
            "a": tracklet_info(&view, q.entry.a_index as usize),
            "b": tracklet_info(&view, q.entry.b_index as usize),
        })
    });
    Json(json!({ "generation": view.generation, "iteration": view.iteration, "pending": pending, "pair": pair }))
        .into_response()
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: HumanAnswer,
}

async fn submit_verdict(State(state): State<AppState>, Path(pair_id): Path<String>, body: Bytes) -> Response {
    let g = generation(&state);
    let body: VerdictBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, g, format!("expected {{\"verdict\": \"match\"|\"nomatch\"|\"skip\"}}: {e}")),
    };
    match state.queue.submit(&pair_id, body.verdict) {
        Ok(()) => Json(json!({ "generation": g, "pair_id": pair_id, "accepted": body.verdict })).into_response(),
        Err(e @ QueueError::AlreadyAnswered(_)) => error(StatusCode::CONFLICT, g, e.to_string()),
        Err(e @ QueueError::UnknownPair(_)) => error(StatusCode::NOT_FOUND, g, e.to_string()),
    }
}

async fn metrics(State(state): State<AppState>) -> Response {
    let view = snapshot(&state);
    Json(json!({
        "generation": view.generation,
        "iteration": view.iteration,
        "latest": view.budget,
        "history": view.history,
        "stopped": view.stopped,
        "review_pending": view.review,
    }))
    .into_response()
}

async fn clusters(State(state): State<AppState>) -> Response {
    let view = snapshot(&state);
    let ids = view.labels.ids();
    let list: Vec<Value> = view
        .labels
        .clusters()
        .iter()
        .map(|(c, members)| json!({ "cluster_id": c, "tracklets": members.iter().map(|&m| ids[m]).collect::<Vec<_>>() }))
        .collect();
    let multi = view.labels.clusters().values().filter(|m| m.len() > 1).count();
    Json(json!({
        "generation": view.generation,
        "iteration": view.iteration,
        "cluster_count": list.len(),
        "multi_member_clusters": multi,
        "clusters": list,
    }))
    .into_response()
}

async fn pair_status(State(state): State<AppState>, Path((a, b)): Path<(TrackletId, TrackletId)>) -> Response {
    let view = snapshot(&state);
    let g = view.generation;
    if a == b {
        return error(StatusCode::BAD_REQUEST, g, "a pair needs two different tracklets");
    }
    let (Some(i), Some(j)) = (view.labels.index_of(a), view.labels.index_of(b)) else {
        return error(StatusCode::NOT_FOUND, g, "unknown tracklet");
    };
    let status = match view.labels.relation_at(i, j) {
        Some(Verdict::Match) => "match",
        Some(Verdict::NoMatch) => "nomatch",
        None => "undecided",
    };
    let pair = view.labels.pair_at(i.min(j), i.max(j));
    Json(json!({
        "generation": g,
        "a": a,
        "b": b,
        "view": view_name(pair.view),
        "distance": view.cache.as_ref().map(|c| c.at(i, j)),
        "status": status,
    }))
    .into_response()
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = req.headers().get(TOKEN_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(token.as_ref()) {
            return error(StatusCode::UNAUTHORIZED, generation(&state), "missing or wrong token");
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/queue/next", get(queue_next))
        .route("/queue/{pair_id}/verdict", post(submit_verdict))
        .route("/metrics", get(metrics))
        .route("/clusters", get(clusters))
        .route("/pairs/{a}/{b}", get(pair_status))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}
