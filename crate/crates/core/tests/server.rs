use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use reid_annotate::config::{RunConfig, Strategy};
use reid_annotate::dataset::{generate_synthetic, CountDist, DatasetManifest, SyntheticParams};
use reid_annotate::model_hook::FrozenModel;
use reid_annotate::oracle::SharedQueue;
use reid_annotate::run::{Engine, OracleMode, StopReason};
use reid_annotate::server::{router, AppState, ServiceView, TOKEN_HEADER};

fn manifest() -> DatasetManifest {
    generate_synthetic(&SyntheticParams {
        identities: 10,
        cameras: 2,
        tracklets_per_identity_per_camera: CountDist::Fixed(2),
        images_per_tracklet: CountDist::Fixed(3),
        dimension: 4,
        within_id_std: 0.1,
        cross_camera_shift_std: 0.2,
        seed: 3,
    })
    .unwrap()
}

fn app(m: &DatasetManifest, token: Option<&str>) -> (Router, AppState) {
    let state = AppState {
        view: ServiceView::shared(m),
        queue: SharedQueue::new(Duration::from_secs(60)),
        token: token.map(Into::into),
    };
    (router(state.clone()), state)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(TOKEN_HEADER, t);
    }
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn token_guards_every_route() {
    let m = manifest();
    let (app, _) = app(&m, Some("s3cret"));
    let (status, body) = call(&app, "GET", "/metrics", None, None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(body["generation"], 0);
    let (status, _) = call(&app, "GET", "/clusters", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, body) = call(&app, "GET", "/metrics", None, Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["generation"], 0);
}

#[tokio::test]
async fn static_view_routes() {
    let m = manifest();
    let (app, _) = app(&m, None);

    let (status, body) = call(&app, "GET", "/queue/next", None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["pair"], Value::Null);
    assert_eq!(body["pending"], 0);

    let (_, body) = call(&app, "GET", "/clusters", None, None).await;
    assert_eq!(body["cluster_count"], 40);
    assert_eq!(body["multi_member_clusters"], 0);

    let ids = m.tracklet_ids();
    let (status, body) = call(&app, "GET", &format!("/pairs/{}/{}", ids[1], ids[0]), None, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "undecided");
    assert_eq!(body["generation"], 0);

    let (status, _) = call(&app, "GET", &format!("/pairs/{}/{}", ids[0], ids[0]), None, None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/pairs/0/999", None, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn verdict_errors() {
    let m = manifest();
    let (app, _) = app(&m, None);
    let (status, body) = call(&app, "POST", "/queue/0-1/verdict", Some(json!({ "verdict": "maybe" })), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("verdict"));
    let (status, body) = call(&app, "POST", "/queue/0-1/verdict", Some(json!({ "verdict": "match" })), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["generation"], 0);
}

/// Drives a human-oracle run entirely over HTTP: truthful answers with
/// every fourth query skipped first.
#[tokio::test]
async fn human_loop_over_http() {
    let m = manifest();
    let truth = m.ground_truth().unwrap();
    let (app, state) = app(&m, None);
    // Unscreened batches keep the number of queries per iteration predictable.
    let mut config = RunConfig {
        strategy: Strategy::ViewAwareOnly,
        max_iterations: 3,
        tpa_runs: 2,
        ..RunConfig::default()
    };
    for (k, v) in [("s1", "8"), ("s2", "4"), ("s3", "4"), ("s4", "8")] {
        config.set(k, v).unwrap();
    }
    let oracle = OracleMode::Human {
        queue: state.queue.clone(),
        shutdown: Arc::new(AtomicBool::new(false)),
    };
    let mut engine = Engine::new(&m, config, oracle, Box::new(FrozenModel), None).unwrap();
    engine.attach_view(state.view.clone());
    let worker = std::thread::spawn(move || {
        let stop = engine.run_to_end();
        (stop, engine)
    });

    let (mut answered, mut skipped, mut conflicts, mut served) = (0u64, 0, 0, 0);
    let mut generations = Vec::new();
    for _ in 0..20_000 {
        let (_, next) = call(&app, "GET", "/queue/next", None, None).await;
        generations.push(next["generation"].as_u64().unwrap());
        let pair = &next["pair"];
        if pair.is_null() {
            if state.view.read().unwrap().stopped.is_some() {
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
            continue;
        }
        served += 1;
        let id = pair["pair_id"].as_str().unwrap().to_string();
        let uri = format!("/queue/{id}/verdict");
        if served % 4 == 0 {
            let (status, _) = call(&app, "POST", &uri, Some(json!({ "verdict": "skip" })), None).await;
            assert_eq!(status, StatusCode::OK);
            skipped += 1;
            continue;
        }
        let a = m.tracklet_index(pair["a"]["tracklet_id"].as_u64().unwrap() as u32).unwrap();
        let b = m.tracklet_index(pair["b"]["tracklet_id"].as_u64().unwrap() as u32).unwrap();
        let verdict = if truth.identity_at(a) == truth.identity_at(b) { "match" } else { "nomatch" };
        let before = next["generation"].as_u64().unwrap();
        let (status, body) = call(&app, "POST", &uri, Some(json!({ "verdict": verdict })), None).await;
        match status {
            StatusCode::OK => {
                answered += 1;
                let (again, _) = call(&app, "POST", &uri, Some(json!({ "verdict": verdict })), None).await;
                assert_eq!(again, StatusCode::CONFLICT, "double submit");
                // Wait until the engine has applied it.
                while state.view.read().unwrap().generation == before {
                    std::thread::sleep(Duration::from_millis(1));
                }
            }
            StatusCode::CONFLICT => conflicts += 1,
            other => panic!("unexpected {other}: {body}"),
        }
    }

    let (stop, engine) = worker.join().unwrap();
    let stop = stop.unwrap();
    assert!(matches!(stop, StopReason::MaxIterations | StopReason::PoolsExhausted | StopReason::NoGain));
    assert!(answered >= 20, "only {answered} verdicts, {skipped} skips, stop {stop:?} after {} iterations: {:?}", engine.iteration(), engine.history());
    assert!(skipped > 0);
    assert_eq!(conflicts, 0);
    assert!(generations.windows(2).all(|w| w[0] <= w[1]), "generation went backwards");

    let (_, metrics) = call(&app, "GET", "/metrics", None, None).await;
    let history = metrics["history"].as_array().unwrap();
    assert_eq!(history.len() as u32, engine.iteration());
    assert_eq!(metrics["latest"]["tp_manual"].as_u64().unwrap(), answered);
    assert_eq!(history.last().unwrap()["tp_manual"].as_u64().unwrap(), answered);
    assert_eq!(engine.labels().counters().manual, answered);
    assert_eq!(metrics["review_pending"], 0);

    // Decided pairs report their status.
    let rec = &engine.ledger()[0];
    let (_, pair) = call(&app, "GET", &format!("/pairs/{}/{}", rec.pair[0], rec.pair[1]), None, None).await;
    let expected = if truth.identity_of(rec.pair[0]) == truth.identity_of(rec.pair[1]) { "match" } else { "nomatch" };
    assert_eq!(pair["status"], expected);
}
