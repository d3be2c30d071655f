// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use cloom_core::attribution::{export_graph, import_graph, trace_prompt, PruneConfig};
use cloom_core::transcoder::{save_bank, train_bank, TcTrainConfig};
use cloom_core::vlm::data::{make_splits, write_jsonl, Task};
use cloom_core::vlm::vocab::decode;
use cloom_core::vlm::{save_checkpoint, train_model, ModelConfig, TrainConfig};
use cloom_serve::{router, AppState, ServeConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

/// Model, bank, data and one graph, trained once per test binary.
fn artifacts() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let tasks = [Task::Color, Task::Shape, Task::Count, Task::Addition];
        let (train, heldout) = make_splits(&tasks, 64, 8, (12, 12), 5).unwrap();
        let tc = TrainConfig {
            steps: 6,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let ck = train_model(ModelConfig::default(), &train, &heldout, &tc).unwrap();
        let bank = train_bank(
            &ck,
            &train,
            &heldout,
            &TcTrainConfig {
                steps: 6,
                max_samples: 32,
                ..TcTrainConfig::default()
            },
        )
        .unwrap();
        save_checkpoint(&ck, &p.join("m.clm1")).unwrap();
        save_bank(&bank, &p.join("b.clm1")).unwrap();
        write_jsonl(&p.join("data.jsonl"), &heldout).unwrap();
        std::fs::create_dir_all(p.join("graphs")).unwrap();
        let s = &heldout[0];
        let (g, _) = trace_prompt(&ck, &bank, &s.image, &decode(&s.prompt), &PruneConfig::default()).unwrap();
        export_graph(&g, &p.join("graphs/g0.json")).unwrap();
        dir
    })
    .path()
}

struct Fixture {
    dir: TempDir,
    config: ServeConfig,
}

impl Fixture {
    fn new() -> Self {
        let src = artifacts();
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("graphs")).unwrap();
        std::fs::copy(src.join("graphs/g0.json"), dir.path().join("graphs/g0.json")).unwrap();
        let text = format!(
            "model = {:?}\nbank = {:?}\ngraphs = \"graphs\"\ndata = [{:?}]\nheatmap_size = 20\nallowed_origins = [\"https://workbench.example\"]\n",
            src.join("m.clm1"),
            src.join("b.clm1"),
            src.join("data.jsonl"),
        );
        let config = ServeConfig::from_toml(&text, dir.path()).unwrap();
        Self { dir, config }
    }

    fn app(&self) -> Router {
        router(Arc::new(AppState::load(self.config.clone()).unwrap()))
    }

    fn graph_path(&self) -> std::path::PathBuf {
        self.dir.path().join("graphs/g0.json")
    }
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn json_of(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = send(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router) -> String {
    let (s, v) = json_of(app, Method::POST, "/api/session", Some(json!({"graph": "g0"}))).await;
    assert_eq!(s, StatusCode::CREATED);
    v["id"].as_str().unwrap().to_string()
}

/// Two distinct feature keys present in the graph.
fn two_features(g: &Value) -> Vec<Value> {
    let mut seen = Vec::new();
    for n in g["nodes"].as_array().unwrap() {
        if n["kind"] == "feature" {
            let key = json!({"layer": n["layer"], "feature": n["feature"]});
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        if seen.len() == 2 {
            break;
        }
    }
    seen
}

#[tokio::test]
async fn health_and_graph_listing() {
    let f = Fixture::new();
    let app = f.app();
    let (s, v) = json_of(&app, Method::GET, "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (_, list) = json_of(&app, Method::GET, "/api/graphs", None).await;
    assert_eq!(list[0]["id"], "g0");
}

#[tokio::test]
async fn graph_is_passed_through_unchanged() {
    let f = Fixture::new();
    let (s, bytes) = send(&f.app(), Method::GET, "/api/graph/g0", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, std::fs::read(f.graph_path()).unwrap());
}

#[tokio::test]
async fn unknown_resources_are_typed_404() {
    let f = Fixture::new();
    let app = f.app();
    for uri in ["/api/graph/nope", "/api/session/s99", "/api/no/such/route", "/api/feature/0/0"] {
        let (s, v) = json_of(&app, Method::GET, uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["error"]["kind"], "not_found", "{uri}");
    }
}

#[tokio::test]
async fn invalid_requests_are_structured_422() {
    let f = Fixture::new();
    let app = f.app();
    let (s, v) = json_of(&app, Method::POST, "/api/session", Some(json!({"graph": "missing"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "validation");
    assert_eq!(v["error"]["field"], "graph");

    let id = new_session(&app).await;
    let bad = json!({"plan": {"clamps": [{"layer": 42, "pos": 0, "feature": 0, "value": 1.0}]}});
    let (s, v) = json_of(&app, Method::POST, &format!("/api/session/{id}/intervene"), Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["kind"], "validation");

    let absent = json!({"label": "x", "members": [{"layer": 0, "feature": 99999}]});
    let (s, v) = json_of(&app, Method::POST, &format!("/api/session/{id}/supernode"), Some(absent)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["field"], "members[0]");
}

#[tokio::test]
async fn supernodes_conserve_edge_weight() {
    let f = Fixture::new();
    let app = f.app();
    let id = new_session(&app).await;
    let (_, flat) = json_of(&app, Method::GET, &format!("/api/session/{id}/graph"), None).await;
    let (_, raw) = json_of(&app, Method::GET, "/api/graph/g0", None).await;
    assert_eq!(flat["nodes"], raw["nodes"]);
    assert_eq!(flat["edges"], raw["edges"]);
    assert_eq!(flat["internal_edges"], 0);

    let members = two_features(&raw);
    let (s, sess) = json_of(
        &app,
        Method::POST,
        &format!("/api/session/{id}/supernode"),
        Some(json!({"id": "grp", "label": "pair", "members": members, "revision": 1})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{sess}");
    assert_eq!(sess["revision"], 2);
    let (_, grouped) = json_of(&app, Method::GET, &format!("/api/session/{id}/graph"), None).await;

    let in_group: Vec<String> = raw["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|n| n["kind"] == "feature" && members.iter().any(|m| m["layer"] == n["layer"] && m["feature"] == n["feature"]))
        .map(|n| n["id"].as_str().unwrap().to_string())
        .collect();
    let map = |id: &str| if in_group.iter().any(|g| g == id) { "group/grp".to_string() } else { id.to_string() };
    let mut expected: BTreeMap<(String, String), f64> = BTreeMap::new();
    for e in raw["edges"].as_array().unwrap() {
        let (a, b) = (map(e["src"].as_str().unwrap()), map(e["dst"].as_str().unwrap()));
        if a == b && a == "group/grp" {
            continue;
        }
        *expected.entry((a, b)).or_default() += e["a"].as_f64().unwrap();
    }
    let got: BTreeMap<(String, String), f64> = grouped["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| ((e["src"].as_str().unwrap().into(), e["dst"].as_str().unwrap().into()), e["a"].as_f64().unwrap()))
        .collect();
    assert_eq!(got.len(), expected.len());
    for (k, v) in &expected {
        assert!((got[k] - v).abs() <= 1e-9, "{k:?}: {} vs {v}", got[k]);
    }
    let group = grouped["nodes"].as_array().unwrap().iter().find(|n| n["id"] == "group/grp").unwrap();
    assert_eq!(group["members"].as_array().unwrap().len(), in_group.len());

    let (s, v) = json_of(
        &app,
        Method::POST,
        &format!("/api/session/{id}/supernode"),
        Some(json!({"label": "again", "members": [members[0]]})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");

    let (s, _) = json_of(&app, Method::DELETE, &format!("/api/session/{id}/supernode/grp"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, back) = json_of(&app, Method::GET, &format!("/api/session/{id}/graph"), None).await;
    assert_eq!(back["edges"], raw["edges"]);
}

#[tokio::test]
async fn stale_sessions_are_refused() {
    let f = Fixture::new();
    let id = new_session(&f.app()).await;
    let mut g = import_graph(&f.graph_path()).unwrap();
    g.meta.extra.insert("edited".into(), json!(true));
    export_graph(&g, &f.graph_path()).unwrap();
    let (s, v) = json_of(&f.app(), Method::GET, &format!("/api/session/{id}"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "stale");
}

#[tokio::test]
async fn outdated_revision_conflicts() {
    let f = Fixture::new();
    let app = f.app();
    let id = new_session(&app).await;
    let (s, v) = json_of(&app, Method::POST, &format!("/api/session/{id}/intervene"), Some(json!({"revision": 7}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "conflict");
}

#[tokio::test]
async fn empty_plan_is_identity_and_replay_is_exact() {
    let f = Fixture::new();
    let app = f.app();
    let id = new_session(&app).await;
    let watch = json!([{"layer": 1, "feature": 0}]);
    let (s, v) = json_of(
        &app,
        Method::POST,
        &format!("/api/session/{id}/intervene"),
        Some(json!({"plan": {"clamps": []}, "watch": watch, "revision": 1})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let rep = &v["report"];
    assert_eq!(rep["baseline"], rep["intervened"]);
    assert_eq!(rep["argmax_changed"], false);
    assert_eq!(rep["watched"][0]["delta"], 0.0);
    let rid = v["report_id"].as_str().unwrap().to_string();

    let (_, first) = send(&app, Method::GET, &format!("/api/session/{id}/report/{rid}"), None).await;
    let (s, again) = json_of(&app, Method::POST, &format!("/api/session/{id}/replay/{rid}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let rid2 = again["report_id"].as_str().unwrap();
    assert_ne!(rid2, rid);
    let (_, second) = send(&app, Method::GET, &format!("/api/session/{id}/report/{rid2}"), None).await;
    assert_eq!(first, second);

    let (_, sess) = json_of(&app, Method::GET, &format!("/api/session/{id}"), None).await;
    assert_eq!(sess["history"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn concurrent_writes_serialize() {
    let f = Fixture::new();
    let app = f.app();
    let id = new_session(&app).await;
    let tasks: Vec<_> = (0..6)
        .map(|_| {
            let app = app.clone();
            let uri = format!("/api/session/{id}/intervene");
            tokio::spawn(async move { json_of(&app, Method::POST, &uri, Some(json!({}))).await })
        })
        .collect();
    let mut revs = Vec::new();
    for t in tasks {
        let (s, v) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        revs.push(v["revision"].as_u64().unwrap());
    }
    revs.sort();
    assert_eq!(revs, (2..8).collect::<Vec<_>>());
    let (_, sess) = json_of(&app, Method::GET, &format!("/api/session/{id}"), None).await;
    assert_eq!(sess["revision"], 7);
    assert_eq!(sess["history"].as_array().unwrap().len(), 6);
}

#[tokio::test]
async fn cors_allows_loopback_and_listed_origins() {
    let f = Fixture::new();
    let app = f.app();
    let preflight = |origin: &'static str| {
        Request::builder()
            .method(Method::OPTIONS)
            .uri("/api/session")
            .header(header::ORIGIN, origin)
            .body(Body::empty())
            .unwrap()
    };
    for (origin, allowed) in [
        ("http://localhost:5173", true),
        ("http://127.0.0.1:3000", true),
        ("https://workbench.example", true),
        ("http://evil.example", false),
        ("http://localhost.evil.example", false),
    ] {
        let resp = app.clone().oneshot(preflight(origin)).await.unwrap();
        assert_eq!(resp.status(), StatusCode::NO_CONTENT);
        let got = resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).map(|v| v.to_str().unwrap().to_string());
        assert_eq!(got.as_deref() == Some(origin), allowed, "{origin}");
        assert_eq!(got.is_some(), allowed, "{origin}");
    }
}

#[tokio::test]
async fn heatmap_is_png_of_configured_size() {
    let f = Fixture::new();
    let app = f.app();
    let st = AppState::load(f.config.clone()).unwrap();
    let sample = st.datasets.values().next().unwrap().sample_id(0);
    let (s, bytes) = send(&app, Method::GET, &format!("/api/heatmap/{sample}/0"), None).await;
    assert_eq!(s, StatusCode::OK);
    let img = image::load_from_memory(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (20, 20));
    let (s, _) = send(&app, Method::GET, &format!("/api/heatmap/{sample}/999"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
