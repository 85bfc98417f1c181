//! HTTP JSON service over a loaded particle store.
//!
//! Routes:
//! - `GET /api/v1/metadata`: the query catalog
//! - `GET /api/v1/prevalence`: one curve set, parameters as in [`parse_query`]
//! - `GET /healthz`: store digest and uptime
//!
//! Every response carries an `ETag` equal to the store digest; the store
//! never changes while the process runs, so a matching `If-None-Match`
//! gets a 304.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use prevalence_core::query::{catalog, parse_query, run_query};
use prevalence_core::store::read_store;
use prevalence_core::synthetic::DemographicMargins;
use prevalence_core::{Error, ParticleStore};
use serde::Serialize;

/// Service settings.
#[derive(Debug, Clone)]
pub struct ApiConfig {
    pub bind: SocketAddr,
    pub store_path: PathBuf,
    /// Census margins the store must have been built from.
    pub margins_path: Option<PathBuf>,
    /// Expected store digest (hex); startup fails on mismatch.
    pub expected_digest: Option<String>,
    /// Origins allowed by CORS; `*` allows any.
    pub allowed_origins: Vec<String>,
    /// JSON-lines request log; stderr when unset.
    pub request_log: Option<PathBuf>,
}

impl ApiConfig {
    pub fn new(store_path: impl Into<PathBuf>) -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            store_path: store_path.into(),
            margins_path: None,
            expected_digest: None,
            allowed_origins: Vec::new(),
            request_log: None,
        }
    }
}

enum LogSink {
    Stderr,
    File(Mutex<File>),
}

impl LogSink {
    fn write(&self, line: &str) {
        match self {
            LogSink::Stderr => eprintln!("{line}"),
            LogSink::File(f) => {
                if let Ok(mut f) = f.lock() {
                    let _ = writeln!(f, "{line}");
                }
            }
        }
    }
}

/// Shared, immutable service state.
pub struct AppState {
    store: ParticleStore,
    digest: String,
    etag: HeaderValue,
    metadata: Vec<u8>,
    started: Instant,
    origins: Vec<String>,
    log: Option<LogSink>,
}

impl AppState {
    pub fn new(store: ParticleStore, allowed_origins: Vec<String>) -> Result<Self, Error> {
        let digest = store.digest_hex();
        let etag = HeaderValue::from_str(&format!("\"{digest}\"")).expect("hex digest is a valid header value");
        let metadata = serde_json::to_vec(&catalog(&store))?;
        Ok(Self { store, digest, etag, metadata, started: Instant::now(), origins: allowed_origins, log: None })
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

/// Load and verify the store named by `config`.
pub fn load_state(config: &ApiConfig) -> Result<AppState, Error> {
    let store = read_store(&config.store_path)?;
    if let Some(expected) = &config.expected_digest {
        if !expected.eq_ignore_ascii_case(&store.digest_hex()) {
            return Err(Error::Digest(format!("store digest {} does not match expected {expected}", store.digest_hex())));
        }
    }
    if let Some(path) = &config.margins_path {
        let margins = DemographicMargins::read_csv(store.grid(), File::open(path)?)?;
        let embedded = store.population().map(|p| &p.margins);
        if embedded != Some(&margins) {
            return Err(Error::Digest(format!("store was not built from the margins in {}", path.display())));
        }
    }
    let mut state = AppState::new(store, config.allowed_origins.clone())?;
    state.log = Some(match &config.request_log {
        Some(path) => LogSink::File(Mutex::new(OpenOptions::new().create(true).append(true).open(path)?)),
        None => LogSink::Stderr,
    });
    Ok(state)
}

/// The full router, including CORS, ETag and logging layers.
pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/metadata", get(metadata))
        .route("/api/v1/prevalence", get(prevalence))
        .route("/healthz", get(healthz))
        .layer(middleware::from_fn_with_state(state.clone(), common_headers))
        .layer(middleware::from_fn_with_state(state.clone(), request_log))
        .with_state(state)
}

/// Bind and serve until ctrl-c; in-flight requests complete before return.
pub async fn serve(config: ApiConfig) -> Result<(), Error> {
    let state = Arc::new(load_state(&config)?);
    let listener = tokio::net::TcpListener::bind(config.bind).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

/// HTTP status and machine-readable code for a query error.
pub fn classify(err: &Error) -> (StatusCode, &'static str) {
    match err {
        Error::InvalidArgument(_) | Error::OffGrid(_) => (StatusCode::BAD_REQUEST, "INVALID_PARAMETER"),
        Error::UnknownDisease(_) | Error::UnknownLevel { .. } => (StatusCode::NOT_FOUND, "NOT_FOUND"),
        Error::EmptySubgroup(_) => (StatusCode::UNPROCESSABLE_ENTITY, "EMPTY_SUBGROUP"),
        Error::TooManyStrata { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "TOO_MANY_STRATA"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
    }
}

fn error_response(err: Error) -> Response {
    let (status, code) = classify(&err);
    (status, Json(ErrorBody { error: code, message: err.to_string() })).into_response()
}

async fn metadata(State(state): State<Arc<AppState>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], state.metadata.clone()).into_response()
}

async fn prevalence(State(state): State<Arc<AppState>>, Query(params): Query<Vec<(String, String)>>) -> Response {
    match parse_query(state.store.grid(), &params).and_then(|q| run_query(&state.store, &q)) {
        Ok(body) => Json(body).into_response(),
        Err(err) => error_response(err),
    }
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'static str,
    store_digest: &'a str,
    uptime_s: f64,
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    Json(Health { status: "ok", store_digest: &state.digest, uptime_s: state.started.elapsed().as_secs_f64() })
        .into_response()
}

fn origin_allowed(state: &AppState, origin: &str) -> bool {
    state.origins.iter().any(|o| o == "*" || o == origin)
}

async fn common_headers(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let origin = req.headers().get(header::ORIGIN).and_then(|v| v.to_str().ok()).map(str::to_string);
    let cors = origin.filter(|o| origin_allowed(&state, o));
    let cacheable = req.uri().path() != "/healthz";

    let mut res = if req.method() == Method::OPTIONS {
        StatusCode::NO_CONTENT.into_response()
    } else if cacheable && etag_matches(req.headers(), &state.etag) {
        StatusCode::NOT_MODIFIED.into_response()
    } else {
        next.run(req).await
    };

    let headers = res.headers_mut();
    if cacheable {
        headers.insert(header::ETAG, state.etag.clone());
        headers.insert(header::CACHE_CONTROL, HeaderValue::from_static("public, no-cache"));
    }
    if let Some(origin) = cors.and_then(|o| HeaderValue::from_str(&o).ok()) {
        headers.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, origin);
        headers.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, OPTIONS"));
        headers.insert(header::ACCESS_CONTROL_EXPOSE_HEADERS, HeaderValue::from_static("etag"));
        headers.insert(header::VARY, HeaderValue::from_static("origin"));
    }
    res
}

fn etag_matches(headers: &HeaderMap, etag: &HeaderValue) -> bool {
    let Some(value) = headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) else {
        return false;
    };
    let etag = etag.to_str().unwrap_or_default();
    value.split(',').map(str::trim).any(|t| t == "*" || t == etag || t.strip_prefix("W/") == Some(etag))
}

#[derive(Serialize)]
struct LogLine<'a> {
    timestamp: String,
    method: &'a str,
    path: &'a str,
    status: u16,
    latency_ms: f64,
}

async fn request_log(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let Some(log) = &state.log else {
        return next.run(req).await;
    };
    let start = Instant::now();
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let res = next.run(req).await;
    let line = LogLine {
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        method: &method,
        path: &path,
        status: res.status().as_u16(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    if let Ok(text) = serde_json::to_string(&line) {
        log.write(&text);
    }
    res
}
