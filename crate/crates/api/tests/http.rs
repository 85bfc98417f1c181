use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::response::Response;
use axum::Router;
use prevalence_api::{load_state, router, ApiConfig, AppState};
use prevalence_core::pipeline::{synthetic_run, SyntheticRun};
use prevalence_core::query::{parse_query, run_query};
use prevalence_core::store::{quantize, read_header, write_store, ParticleBlock, ParticleStore, StoreParams};
use prevalence_core::{GridConfig, GridIndex, PipelineConfig};
use serde_json::Value;
use tower::ServiceExt;

fn run() -> &'static SyntheticRun {
    static RUN: OnceLock<SyntheticRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut config = PipelineConfig::desk();
        config.grid.age_max = 65;
        config.grid.year_max = 2019;
        config.generation.ensemble_size = 100;
        config.generation.particles = 50;
        config.generation.weight_replicates = 20;
        config.generation.survey_size = 4000;
        synthetic_run(&config, 3, None).unwrap()
    })
}

fn app() -> Router {
    router(Arc::new(AppState::new(run().store.clone(), vec!["https://dash.example".into()]).unwrap()))
}

async fn get(app: &Router, uri: &str) -> Response {
    app.clone().oneshot(Request::get(uri).body(Body::empty()).unwrap()).await.unwrap()
}

async fn body(res: Response) -> Vec<u8> {
    to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec()
}

async fn json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let res = get(app, uri).await;
    let status = res.status();
    (status, serde_json::from_slice(&body(res).await).unwrap())
}

fn write_fixture(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("store.bin");
    write_store(&path, &run().store).unwrap();
    path
}

#[tokio::test]
async fn metadata_describes_the_grid() {
    let app = app();
    let (status, meta) = json(&app, "/api/v1/metadata").await;
    assert_eq!(status, StatusCode::OK);
    let cfg = &run().config.grid;
    assert_eq!(meta["license"], "CC BY-NC-SA 4.0");
    assert_eq!(meta["diseases"].as_array().unwrap().len(), cfg.diseases.len());
    assert_eq!(meta["locations"].as_array().unwrap().len(), cfg.n_locations());
    assert_eq!(meta["cohorts"].as_array().unwrap().len(), cfg.n_cohorts());
    assert_eq!(meta["regions"][0]["locations"], serde_json::json!(["101", "102"]));
    assert_eq!(meta["age_span"], serde_json::json!([60, 65]));
    assert_eq!(meta["max_strata"], 5);
}

#[tokio::test]
async fn metadata_is_byte_identical_across_restarts() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path());
    let mut bodies = Vec::new();
    for _ in 0..2 {
        let state = load_state(&ApiConfig { request_log: Some(dir.path().join("log")), ..ApiConfig::new(&path) }).unwrap();
        bodies.push(body(get(&router(Arc::new(state)), "/api/v1/metadata").await).await);
    }
    assert_eq!(bodies[0], bodies[1]);
}

#[tokio::test]
async fn prevalence_matches_a_direct_engine_call() {
    let app = app();
    let uri = "/api/v1/prevalence?disease=resp&view=BY_AGE&f=region:south&f=sex:1&stratify=smoking&level=0.8";
    let res = get(&app, uri).await;
    assert_eq!(res.status(), StatusCode::OK);
    let bytes = body(res).await;
    let store = &run().store;
    let params = [("disease", "resp"), ("view", "BY_AGE"), ("f", "region:south"), ("f", "sex:1"), ("stratify", "smoking"), ("level", "0.8")];
    let direct = run_query(store, &parse_query(store.grid(), &params).unwrap()).unwrap();
    assert_eq!(bytes, serde_json::to_vec(&direct).unwrap());
    assert_eq!(direct.series.len(), 2);
}

#[tokio::test]
async fn percent_encoded_and_repeated_filters() {
    let app = app();
    let (status, v) = json(&app, "/api/v1/prevalence?disease=cardio&f=lhu%3A101&f=lhu:202&f=cohort:1950,1954").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["filters"]["location"], serde_json::json!(["101", "202"]));
    assert_eq!(v["filters"]["cohort"], serde_json::json!(["1950", "1954"]));
}

#[tokio::test]
async fn bands_can_be_omitted() {
    let app = app();
    let (_, with) = json(&app, "/api/v1/prevalence?disease=cardio").await;
    assert!(with["series"][0]["lo"].is_array() && with["series"][0]["hi"].is_array());
    let (_, without) = json(&app, "/api/v1/prevalence?disease=cardio&bands=false").await;
    assert!(without["series"][0].get("lo").is_none() && without["series"][0].get("hi").is_none());
    assert_eq!(with["series"][0]["mean"], without["series"][0]["mean"]);
}

#[tokio::test]
async fn stratification_limit() {
    let app = app();
    let (status, v) = json(&app, "/api/v1/prevalence?disease=cardio&stratify=age&f=age:60,61,62,63,64").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["series"].as_array().unwrap().len(), 5);
    let (status, v) = json(&app, "/api/v1/prevalence?disease=cardio&stratify=age").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "TOO_MANY_STRATA");
    assert!(v["message"].as_str().unwrap().contains("f=age:"));
}

#[tokio::test]
async fn error_statuses() {
    let app = app();
    let cases = [
        ("/api/v1/prevalence?disease=gout", StatusCode::NOT_FOUND),
        ("/api/v1/prevalence?disease=cardio&f=lhu:999", StatusCode::NOT_FOUND),
        ("/api/v1/prevalence?disease=cardio&f=region:west", StatusCode::NOT_FOUND),
        ("/api/v1/prevalence", StatusCode::BAD_REQUEST),
        ("/api/v1/prevalence?disease=cardio&view=sideways", StatusCode::BAD_REQUEST),
        ("/api/v1/prevalence?disease=cardio&f=age:90", StatusCode::BAD_REQUEST),
        ("/api/v1/prevalence?disease=cardio&level=1.5", StatusCode::BAD_REQUEST),
        ("/api/v1/prevalence?disease=cardio&colour=red", StatusCode::BAD_REQUEST),
    ];
    for (uri, expected) in cases {
        let (status, v) = json(&app, uri).await;
        assert_eq!(status, expected, "{uri}: {v}");
        assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let (status, v) = json(&app, "/api/v1/prevalence?disease=cardio&colour=red").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["message"].as_str().unwrap().contains("colour"));
}

#[tokio::test]
async fn empty_subgroup_is_422() {
    let config = GridConfig::desk();
    let grid = GridIndex::new(config.clone()).unwrap();
    let p = 4;
    let blocks = (0..grid.len())
        .map(|cell| {
            let w = if grid.profile(cell).location == 0 { 0.0 } else { 1.0 };
            ParticleBlock { cell, probabilities: vec![quantize(0.2); 4 * p], weights: vec![w; p], mean_weight: w as f64 }
        })
        .collect();
    let params = StoreParams { particles: p, original_size: p, stride: 1, replicates: p, seed: 0 };
    let store = ParticleStore::from_blocks(config, params, blocks, None).unwrap();
    let app = router(Arc::new(AppState::new(store, vec![]).unwrap()));
    let (status, v) = json(&app, "/api/v1/prevalence?disease=cardio&f=lhu:101").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "EMPTY_SUBGROUP");
}

#[tokio::test]
async fn healthz_reports_the_header_digest() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path());
    let state = load_state(&ApiConfig { request_log: Some(dir.path().join("log")), ..ApiConfig::new(&path) }).unwrap();
    let app = router(Arc::new(state));
    let (status, a) = json(&app, "/healthz").await;
    let (_, b) = json(&app, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a["status"], "ok");
    let header = read_header(&path).unwrap();
    let expected: String = header.payload_digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(a["store_digest"], expected);
    assert_eq!(a["store_digest"], b["store_digest"]);
    assert!(b["uptime_s"].as_f64().unwrap() >= a["uptime_s"].as_f64().unwrap());
}

#[tokio::test]
async fn etag_and_conditional_requests() {
    let app = app();
    let res = get(&app, "/api/v1/prevalence?disease=cardio").await;
    let etag = res.headers().get(header::ETAG).unwrap().clone();
    assert_eq!(etag.to_str().unwrap(), format!("\"{}\"", run().store.digest_hex()));
    let meta = get(&app, "/api/v1/metadata").await;
    assert_eq!(meta.headers().get(header::ETAG), Some(&etag));

    let req = Request::get("/api/v1/prevalence?disease=cardio").header(header::IF_NONE_MATCH, etag).body(Body::empty()).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    assert_eq!(res.status(), StatusCode::NOT_MODIFIED);
    assert!(body(res).await.is_empty());

    let req = Request::get("/api/v1/metadata").header(header::IF_NONE_MATCH, "\"stale\"").body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
}

#[tokio::test]
async fn cors_only_for_allowed_origins() {
    let app = app();
    let req = |origin: &str| Request::get("/api/v1/metadata").header(header::ORIGIN, origin).body(Body::empty()).unwrap();
    let ok = app.clone().oneshot(req("https://dash.example")).await.unwrap();
    assert_eq!(ok.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(), "https://dash.example");
    let other = app.clone().oneshot(req("https://elsewhere.example")).await.unwrap();
    assert!(other.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
    let preflight = Request::options("/api/v1/prevalence").header(header::ORIGIN, "https://dash.example").body(Body::empty()).unwrap();
    let res = app.clone().oneshot(preflight).await.unwrap();
    assert_eq!(res.status(), StatusCode::NO_CONTENT);
    assert!(res.headers().get(header::ACCESS_CONTROL_ALLOW_METHODS).is_some());
}

#[tokio::test]
async fn responses_do_not_depend_on_request_order() {
    let uris = [
        "/api/v1/prevalence?disease=cardio&stratify=sex",
        "/api/v1/prevalence?disease=tumors&view=age&f=region:north",
        "/api/v1/metadata",
        "/api/v1/prevalence?disease=cardio&f=lhu:999",
    ];
    let app = app();
    let mut forward = Vec::new();
    for uri in uris {
        forward.push(body(get(&app, uri).await).await);
    }
    let fresh = self::app();
    for (i, uri) in uris.iter().enumerate().rev() {
        assert_eq!(body(get(&fresh, uri).await).await, forward[i], "{uri}");
    }
}

#[tokio::test]
async fn responses_never_carry_per_cell_particles() {
    let app = app();
    let (_, v) = json(&app, "/api/v1/prevalence?disease=cardio&f=lhu:101&f=cohort:1950&f=age:60&f=sex:0&f=smoking:0&f=education:0").await;
    let series = &v["series"][0];
    let keys: Vec<&String> = series.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["hi", "label", "lo", "mean", "weight"]);
    assert_eq!(series["mean"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn request_log_is_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path());
    let log = dir.path().join("requests.jsonl");
    let state = load_state(&ApiConfig { request_log: Some(log.clone()), ..ApiConfig::new(&path) }).unwrap();
    let app = router(Arc::new(state));
    get(&app, "/healthz").await;
    get(&app, "/api/v1/prevalence?disease=nope").await;
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["path"], "/healthz");
    assert_eq!(lines[0]["status"], 200);
    assert_eq!(lines[1]["status"], 404);
    for line in &lines {
        assert!(line["latency_ms"].as_f64().unwrap() >= 0.0);
        assert!(line["timestamp"].as_str().unwrap().ends_with('Z'));
    }
}

#[test]
fn startup_refuses_bad_stores() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path());
    let wrong = ApiConfig { expected_digest: Some("00".repeat(32)), ..ApiConfig::new(&path) };
    assert!(load_state(&wrong).err().unwrap().is_corruption());
    let right = ApiConfig { expected_digest: Some(run().store.digest_hex()), ..ApiConfig::new(&path) };
    assert!(load_state(&right).is_ok());

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(load_state(&ApiConfig::new(&path)).err().unwrap().is_corruption());
}

#[test]
fn startup_checks_margins() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path());
    let grid = run().store.grid();
    let good = dir.path().join("margins.csv");
    run().inputs.margins.write_csv(grid, std::fs::File::create(&good).unwrap()).unwrap();
    assert!(load_state(&ApiConfig { margins_path: Some(good), ..ApiConfig::new(&path) }).is_ok());

    let mut other = run().inputs.margins.clone();
    other.counts[0] = other.counts[0].map(|c| c + 1);
    let bad = dir.path().join("other.csv");
    other.write_csv(grid, std::fs::File::create(&bad).unwrap()).unwrap();
    assert!(load_state(&ApiConfig { margins_path: Some(bad), ..ApiConfig::new(&path) }).is_err());
}
