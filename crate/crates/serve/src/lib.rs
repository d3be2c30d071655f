// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local HTTP service over cloom artifacts for the circuit workbench.

pub mod config;
pub mod error;
pub mod group;
pub mod session;

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use cloom_core::attribution::{trace_id, AttributionGraph};
use cloom_core::container::sha256_hex;
use cloom_core::features::{parse_sample_id, ActivationStore, Dataset};
use cloom_core::intervention::{apply, DonorRun, InterventionPlan, InterventionReport, WatchedFeature};
use cloom_core::rollout::{decode_pgm, encode_pgm, rollout, token_heatmaps, Geometry, RolloutConfig};
use cloom_core::transcoder::{load_bank, TranscoderBank};
use cloom_core::vlm::data::read_jsonl;
use cloom_core::vlm::{load_checkpoint, ModelCheckpoint, SyntheticSample};
use serde::{Deserialize, Serialize};

pub use config::ServeConfig;
pub use error::{ErrorBody, ServeError};
pub use group::{grouped_view, CondensedGraph, MemberRef, Supernode};
pub use session::{HistoryEntry, Session, SessionStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEntry {
    pub id: String,
    pub prompt: String,
    pub trace_id: String,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub hash: String,
    #[serde(skip)]
    pub path: PathBuf,
}

/// Everything the handlers read. Artifacts are immutable once loaded.
pub struct AppState {
    pub config: ServeConfig,
    pub checkpoint: ModelCheckpoint,
    pub bank: TranscoderBank,
    pub model_hash: String,
    pub bank_hash: String,
    pub graphs: BTreeMap<String, GraphEntry>,
    pub store: Option<ActivationStore>,
    pub datasets: BTreeMap<String, Dataset>,
    /// Trace id to `(dataset id, sample index)`.
    pub traces: BTreeMap<String, (String, usize)>,
    pub sessions: SessionStore,
    locks: Mutex<BTreeMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl AppState {
    pub fn load(config: ServeConfig) -> Result<Self, ServeError> {
        let checkpoint = load_checkpoint(&config.model)?;
        let bank = load_bank(&config.bank)?;
        bank.check_matches(&checkpoint.model)?;
        let model_hash = checkpoint.hash()?;
        let bank_hash = bank.hash()?;
        let mut graphs = BTreeMap::new();
        let dir = std::fs::read_dir(&config.graphs)
            .map_err(|e| ServeError::Config(format!("graphs directory {}: {e}", config.graphs.display())))?;
        for entry in dir {
            let path = entry?.path();
            if path.extension().is_none_or(|x| x != "json") {
                continue;
            }
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let bytes = std::fs::read(&path)?;
            let g = AttributionGraph::from_json(&String::from_utf8_lossy(&bytes))?;
            graphs.insert(
                id.clone(),
                GraphEntry {
                    id,
                    prompt: g.meta.prompt.clone(),
                    trace_id: g.meta.trace_id.clone(),
                    n_nodes: g.nodes.len(),
                    n_edges: g.edges.len(),
                    hash: sha256_hex(&bytes),
                    path,
                },
            );
        }
        let store = config.store.as_deref().map(ActivationStore::load).transpose()?;
        let mut datasets = BTreeMap::new();
        let mut traces = BTreeMap::new();
        for p in &config.data {
            let ds = Dataset::new(p.display().to_string(), read_jsonl(p)?)?;
            for (i, s) in ds.samples.iter().enumerate() {
                traces.entry(trace_id(&s.image, &s.prompt)).or_insert((ds.id.clone(), i));
            }
            datasets.insert(ds.id.clone(), ds);
        }
        let sessions = SessionStore::open(&config.sessions)?;
        Ok(Self {
            config,
            checkpoint,
            bank,
            model_hash,
            bank_hash,
            graphs,
            store,
            datasets,
            traces,
            sessions,
            locks: Mutex::new(BTreeMap::new()),
        })
    }

    fn lock(&self, session: &str) -> Arc<tokio::sync::Mutex<()>> {
        let mut m = self.locks.lock().expect("lock table poisoned");
        m.entry(session.to_string()).or_default().clone()
    }

    fn graph_entry(&self, id: &str) -> Result<&GraphEntry, ServeError> {
        self.graphs.get(id).ok_or_else(|| ServeError::not_found("graph", id))
    }

    pub fn load_graph(&self, id: &str) -> Result<AttributionGraph, ServeError> {
        let e = self.graph_entry(id)?;
        Ok(cloom_core::attribution::import_graph(&e.path)?)
    }

    pub fn sample(&self, sample_id: &str) -> Result<&SyntheticSample, ServeError> {
        let (ds, idx) = parse_sample_id(sample_id).map_err(|_| ServeError::not_found("sample", sample_id))?;
        self.datasets
            .get(ds)
            .and_then(|d| d.samples.get(idx))
            .ok_or_else(|| ServeError::not_found("sample", sample_id))
    }

    pub fn sample_by_trace(&self, trace: &str) -> Result<&SyntheticSample, ServeError> {
        let (ds, idx) = self.traces.get(trace).ok_or_else(|| ServeError::not_found("trace", trace))?;
        Ok(&self.datasets[ds].samples[*idx])
    }

    /// Session loaded and checked against its graph's current hash.
    pub fn session(&self, id: &str) -> Result<Session, ServeError> {
        let raw = self.sessions.load(id, None)?;
        let entry = self.graph_entry(&raw.graph)?;
        self.sessions.load(id, Some(&entry.hash))
    }

    /// Heatmap of image token `token` of a sample, as PNG bytes.
    pub fn heatmap_png(&self, sample_id: &str, token: usize) -> Result<Vec<u8>, ServeError> {
        let s = self.sample(sample_id)?;
        let model = &self.checkpoint.model;
        let (_, trace) = model.forward(&s.image, &s.prompt, true)?;
        let trace = trace.ok_or_else(|| ServeError::Config("forward pass returned no trace".into()))?;
        let size = self.config.heatmap_size;
        let cfg = RolloutConfig {
            output: Some((size, size)),
            ..RolloutConfig::default()
        };
        let r = rollout(&trace.vision, &cfg)?;
        let maps = token_heatmaps(&r.matrix, &Geometry::from_trace(&trace.vision), &cfg)?;
        let map = maps
            .maps
            .get(token)
            .ok_or_else(|| ServeError::not_found("image token", token.to_string()))?;
        let (h, w, px) = decode_pgm(&encode_pgm(map))?;
        let gray = image::GrayImage::from_raw(w as u32, h as u32, px.iter().map(|&v| (v * 255.0).round() as u8).collect())
            .ok_or_else(|| ServeError::Config("heatmap buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        gray.write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| ServeError::Io(std::io::Error::other(e)))?;
        Ok(out.into_inner())
    }
}

type Shared = Arc<AppState>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ServeError> {
    serde_json::from_slice(body).map_err(|e| ServeError::validation("body", e.to_string()))
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn health(State(st): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "model_hash": st.model_hash,
        "bank_hash": st.bank_hash,
    }))
}

async fn list_graphs(State(st): State<Shared>) -> Json<Vec<GraphEntry>> {
    Json(st.graphs.values().cloned().collect())
}

async fn get_graph(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Response, ServeError> {
    let e = st.graph_entry(&id)?;
    Ok(json_bytes(std::fs::read(&e.path)?))
}

#[derive(Deserialize)]
struct FeatureQuery {
    k: Option<usize>,
}

async fn get_feature(
    State(st): State<Shared>,
    UrlPath((layer, feature)): UrlPath<(usize, usize)>,
    Query(q): Query<FeatureQuery>,
) -> Result<Response, ServeError> {
    let store = st.store.as_ref().ok_or_else(|| ServeError::not_found("feature store", "(none configured)"))?;
    if !store.contains(layer, feature) {
        return Err(ServeError::not_found("feature", format!("{layer}/{feature}")));
    }
    Ok(Json(store.profile(layer, feature, q.k.unwrap_or(20))?).into_response())
}

async fn get_heatmap(
    State(st): State<Shared>,
    UrlPath((sample, token)): UrlPath<(String, usize)>,
) -> Result<Response, ServeError> {
    let png = st.heatmap_png(&sample, token)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_session(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, ServeError> {
    Ok(Json(st.session(&id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    graph: String,
    #[serde(default)]
    annotations: BTreeMap<String, String>,
}

async fn create_session(State(st): State<Shared>, body: Bytes) -> Result<Response, ServeError> {
    let req: NewSession = parse_body(&body)?;
    let entry = st.graph_entry(&req.graph).map_err(|_| ServeError::validation("graph", format!("unknown graph `{}`", req.graph)))?;
    let creation = st.lock("\0create");
    let _g = creation.lock().await;
    let mut s = Session::new(st.sessions.next_id()?, entry.id.clone(), entry.hash.clone());
    s.annotations = req.annotations;
    st.sessions.save(&mut s)?;
    Ok((StatusCode::CREATED, Json(s)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSupernode {
    #[serde(default)]
    id: Option<String>,
    label: String,
    members: Vec<MemberRef>,
    #[serde(default)]
    notes: String,
    #[serde(default)]
    revision: Option<u64>,
}

async fn add_supernode(State(st): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Session>, ServeError> {
    let req: NewSupernode = parse_body(&body)?;
    let lock = st.lock(&id);
    let _g = lock.lock().await;
    let mut s = st.session(&id)?;
    s.check_revision(req.revision)?;
    let graph = st.load_graph(&s.graph)?;
    let sn = Supernode {
        id: req.id.unwrap_or_else(|| format!("n{}", s.supernodes.len() + 1)),
        label: req.label,
        members: req.members,
        notes: req.notes,
    };
    group::check_supernode(&graph, &s.supernodes, &sn)?;
    s.supernodes.push(sn);
    st.sessions.save(&mut s)?;
    Ok(Json(s))
}

async fn remove_supernode(
    State(st): State<Shared>,
    UrlPath((id, node)): UrlPath<(String, String)>,
) -> Result<Json<Session>, ServeError> {
    let lock = st.lock(&id);
    let _g = lock.lock().await;
    let mut s = st.session(&id)?;
    let before = s.supernodes.len();
    s.supernodes.retain(|n| n.id != node);
    if s.supernodes.len() == before {
        return Err(ServeError::not_found("supernode", node));
    }
    st.sessions.save(&mut s)?;
    Ok(Json(s))
}

async fn session_graph(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> Result<Json<CondensedGraph>, ServeError> {
    let s = st.session(&id)?;
    let g = st.load_graph(&s.graph)?;
    Ok(Json(grouped_view(&g, &s.supernodes)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct InterveneRequest {
    #[serde(default)]
    plan: InterventionPlan,
    /// Sample id of the input; defaults to the session graph's input.
    #[serde(default)]
    sample: Option<String>,
    #[serde(default)]
    watch: Vec<WatchedFeature>,
    #[serde(default)]
    revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterveneResponse {
    pub report_id: String,
    pub revision: u64,
    pub report: InterventionReport,
}

fn run_report(st: &AppState, target: &SyntheticSample, plan: &InterventionPlan, watch: &[WatchedFeature]) -> Result<Vec<u8>, ServeError> {
    let donor = match &plan.donor {
        Some(d) if !d.copy.is_empty() => {
            let ds = st
                .sample_by_trace(&d.trace)
                .map_err(|_| ServeError::validation("plan.donor.trace", format!("no loaded sample has trace id {}", d.trace)))?;
            Some(DonorRun::capture(&st.checkpoint.model, &st.bank, &ds.image, &ds.prompt)?)
        }
        _ => None,
    };
    let report = apply(&st.checkpoint.model, &st.bank, &target.image, &target.prompt, plan, donor.as_ref(), watch)
        .map_err(|e| match e {
            cloom_core::CloomError::InvalidArgument(m) => ServeError::validation("plan", m),
            other => other.into(),
        })?;
    Ok(serde_json::to_vec_pretty(&report).map_err(cloom_core::CloomError::from)?)
}

async fn record_run(
    st: &AppState,
    mut s: Session,
    entry_plan: InterventionPlan,
    target: &SyntheticSample,
    watch: Vec<WatchedFeature>,
) -> Result<InterveneResponse, ServeError> {
    let bytes = run_report(st, target, &entry_plan, &watch)?;
    let report_id = format!("{}-r{}", s.id, s.history.len() + 1);
    st.sessions.save_report(&report_id, &bytes)?;
    s.history.push(HistoryEntry {
        report_id: report_id.clone(),
        plan: entry_plan,
        target: trace_id(&target.image, &target.prompt),
        watch,
    });
    st.sessions.save(&mut s)?;
    Ok(InterveneResponse {
        report_id,
        revision: s.revision,
        report: serde_json::from_slice(&bytes).map_err(cloom_core::CloomError::from)?,
    })
}

async fn intervene(State(st): State<Shared>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<InterveneResponse>, ServeError> {
    let req: InterveneRequest = parse_body(&body)?;
    let lock = st.lock(&id);
    let _g = lock.lock().await;
    let s = st.session(&id)?;
    s.check_revision(req.revision)?;
    let target = match &req.sample {
        Some(sid) => st.sample(sid).map_err(|_| ServeError::validation("sample", format!("unknown sample `{sid}`")))?,
        None => {
            let g = st.graph_entry(&s.graph)?;
            st.sample_by_trace(&g.trace_id).map_err(|_| {
                ServeError::validation("sample", "the session graph's input is not among the loaded samples; pass `sample`")
            })?
        }
    };
    Ok(Json(record_run(&st, s, req.plan, target, req.watch).await?))
}

async fn get_report(State(st): State<Shared>, UrlPath((id, rid)): UrlPath<(String, String)>) -> Result<Response, ServeError> {
    let s = st.session(&id)?;
    if !s.history.iter().any(|h| h.report_id == rid) {
        return Err(ServeError::not_found("report", rid));
    }
    Ok(json_bytes(st.sessions.load_report(&rid)?))
}

async fn replay(State(st): State<Shared>, UrlPath((id, rid)): UrlPath<(String, String)>) -> Result<Json<InterveneResponse>, ServeError> {
    let lock = st.lock(&id);
    let _g = lock.lock().await;
    let s = st.session(&id)?;
    let entry = s
        .history
        .iter()
        .find(|h| h.report_id == rid)
        .cloned()
        .ok_or_else(|| ServeError::not_found("report", &rid))?;
    let target = st.sample_by_trace(&entry.target)?;
    Ok(Json(record_run(&st, s, entry.plan, target, entry.watch).await?))
}

/// Whether `origin` is a loopback origin or explicitly allowed.
pub fn origin_allowed(origin: &str, extra: &[String]) -> bool {
    if extra.iter().any(|o| o == origin) {
        return true;
    }
    let rest = origin.strip_prefix("http://").or_else(|| origin.strip_prefix("https://"));
    let Some(rest) = rest else { return false };
    let host = if let Some(v6) = rest.strip_prefix('[') {
        v6.split(']').next().map(|h| format!("[{h}]"))
    } else {
        rest.split(':').next().map(str::to_string)
    };
    let port_ok = |tail: &str| tail.is_empty() || (tail.starts_with(':') && tail[1..].bytes().all(|b| b.is_ascii_digit()) && tail.len() > 1);
    match host {
        Some(h) if ["localhost", "127.0.0.1", "[::1]"].contains(&h.as_str()) => port_ok(&rest[h.len()..]),
        _ => false,
    }
}

async fn cors(State(st): State<Shared>, req: Request, next: Next) -> Response {
    let origin = req
        .headers()
        .get(header::ORIGIN)
        .and_then(|v| v.to_str().ok())
        .filter(|o| origin_allowed(o, &st.config.allowed_origins))
        .map(str::to_string);
    let preflight = req.method() == Method::OPTIONS;
    let mut resp = if preflight {
        StatusCode::NO_CONTENT.into_response()
    } else {
        next.run(req).await
    };
    if let Some(o) = origin {
        let h: &mut HeaderMap = resp.headers_mut();
        if let Ok(v) = HeaderValue::from_str(&o) {
            h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, v);
        }
        h.insert(header::VARY, HeaderValue::from_static("Origin"));
        if preflight {
            h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, DELETE, OPTIONS"));
            h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
        }
    }
    resp
}

async fn fallback() -> ServeError {
    ServeError::not_found("route", "")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/graphs", get(list_graphs))
        .route("/api/graph/:id", get(get_graph))
        .route("/api/feature/:layer/:idx", get(get_feature))
        .route("/api/heatmap/:sample/:token", get(get_heatmap))
        .route("/api/session", post(create_session))
        .route("/api/session/:id", get(get_session))
        .route("/api/session/:id/graph", get(session_graph))
        .route("/api/session/:id/supernode", post(add_supernode))
        .route("/api/session/:id/supernode/:node", delete(remove_supernode))
        .route("/api/session/:id/intervene", post(intervene))
        .route("/api/session/:id/report/:rid", get(get_report))
        .route("/api/session/:id/replay/:rid", post(replay))
        .fallback(fallback)
        .layer(middleware::from_fn_with_state(state.clone(), cors))
        .with_state(state)
}

/// Binds and serves until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<(), ServeError> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = Arc::new(AppState::load(config)?);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ServeError::Config(format!("cannot bind {addr}: {e}")))?;
    tracing::info!(%addr, graphs = state.graphs.len(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
