// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use msae::apps::build_index;
use msae::concepts::{name_neurons, ConceptVocab, DEFAULT_RATIO_THRESHOLD, DEFAULT_SIM_THRESHOLD};
use msae::embedset::synthesize;
use msae::metrics::{train_probe, ProbeConfig};
use msae::service::{openapi_document, router, ServiceState};
use msae::train::{train, TrainConfig};
use msae::{Checkpoint, EmbeddingSet, SaeConfig, SyntheticSpec, Variant};
use serde_json::{json, Value};
use tower::ServiceExt;

struct World {
    ckpt: Checkpoint,
    set: EmbeddingSet,
    state: Arc<ServiceState>,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let spec = SyntheticSpec { n: 8, d_true: 12, s: 2, m: 400, noise_sigma: 0.01, seed: 5 };
        let (set, truth) = synthesize(&spec).unwrap();
        let set = set.with_class_labels(truth.dominant_atom_labels(2)).unwrap();
        let sae = SaeConfig::new(8, 32, Variant::Matryoshka { k_list: vec![2, 8, 32], alpha: vec![1.0; 3] }, None).unwrap();
        let tc = TrainConfig { lr: 3e-3, batch_size: 64, epochs: 5, seed: 1, ..TrainConfig::for_variant(&sae.variant) };
        let ckpt = train(&set, &sae, &tc).unwrap().checkpoint;
        let names = (0..12).map(|i| format!("atom{i}")).collect();
        let vocab = ConceptVocab::new(names, truth.atoms.clone(), set.modality()).unwrap();
        let (concepts, _) = name_neurons(&ckpt, &vocab, DEFAULT_SIM_THRESHOLD, DEFAULT_RATIO_THRESHOLD).unwrap();
        let probe = train_probe(&set, &ProbeConfig { epochs: 5, ..Default::default() }).unwrap();
        let index = build_index(&ckpt, &set).unwrap();
        let state = Arc::new(ServiceState::new(index, concepts, Some(probe)).unwrap());
        World { ckpt, set, state }
    })
}

fn app() -> Router {
    router(world().state.clone(), &[]).unwrap()
}

async fn call(app: Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let raw = body.map(|b| b.to_string());
    call_raw(app, method, uri, raw).await
}

async fn call_raw(app: Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_reports_model() {
    let (st, v) = call(app(), "GET", "/health", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model"]["n"], 8);
    assert_eq!(v["model"]["d"], 32);
    assert_eq!(v["index"]["samples"], 400);
    assert_eq!(v["probe"], 2);
}

#[tokio::test]
async fn concepts_filter() {
    let (st, all) = call(app(), "GET", "/concepts", None).await;
    assert_eq!(st, StatusCode::OK);
    let all = all.as_array().unwrap().clone();
    assert_eq!(all.len(), 32);
    let (_, valid) = call(app(), "GET", "/concepts?valid_only=true", None).await;
    let valid = valid.as_array().unwrap();
    assert_eq!(valid.len(), all.iter().filter(|a| a["valid"] == true).count());
    assert!(valid.iter().all(|a| a["valid"] == true));
}

#[tokio::test]
async fn sample_activations_sorted_and_bounded() {
    let (st, v) = call(app(), "GET", "/samples/3/activations?top=4", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["id"], "3");
    let acts = v["activations"].as_array().unwrap();
    assert!(acts.len() <= 4);
    let values: Vec<f64> = acts.iter().map(|a| a["activation"].as_f64().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
    let (st, _) = call(app(), "GET", "/samples/4000/activations", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    let (st, _) = call(app(), "GET", "/samples/nope/activations", None).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn search_self_first_in_both_spaces() {
    for space in ["embedding", "activation"] {
        for id in ["0", "17", "399"] {
            let (st, v) = call(app(), "POST", "/search", Some(json!({"query_id": id, "space": space, "t": 5}))).await;
            assert_eq!(st, StatusCode::OK);
            let hits = v["hits"].as_array().unwrap();
            assert_eq!(hits.len(), 5);
            assert_eq!(hits[0]["id"], id, "{space}");
        }
    }
    let row: Vec<f64> = world().set.row(9).to_vec();
    let (st, v) = call(app(), "POST", "/search", Some(json!({"vector": row, "t": 1}))).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v["hits"][0]["id"], "9");
}

#[tokio::test]
async fn manipulate_empty_edits_has_zero_displacement() {
    let (st, v) = call(app(), "POST", "/manipulate", Some(json!({"sample": "12", "edits": [], "search": 3}))).await;
    assert_eq!(st, StatusCode::OK);
    assert!(v["displacement"].as_f64().unwrap().abs() < 1e-9);
    assert_eq!(v["vector"], v["reconstruction_raw"]);
    assert_eq!(v["neighbors"].as_array().unwrap().len(), 3);
    assert!(v["top_activations"].is_array());
}

#[tokio::test]
async fn manipulate_edit_moves_by_column_norm() {
    let w = world();
    let (st, v) =
        call(app(), "POST", "/manipulate", Some(json!({"sample": "12", "edits": [{"neuron": 0, "magnitude": 100.0}]}))).await;
    assert_eq!(st, StatusCode::OK);
    let z0 = v["edited_activations"][0].as_f64().unwrap();
    assert_eq!(z0, 100.0);
    // Unit decoder column scaled back to raw space.
    let (_, plain) = call(app(), "POST", "/manipulate", Some(json!({"sample": "12", "return_space": "activation"}))).await;
    let before = plain["vector"][0].as_f64().unwrap();
    let want = (100.0 - before) / w.ckpt.train_stats().scale;
    let got = v["displacement"].as_f64().unwrap();
    assert!((got - want).abs() < 1e-6 * want.max(1.0), "{got} vs {want}");
}

#[tokio::test]
async fn sweep_echoes_grid_order() {
    let grid = [0.3, 20.0, 30.0];
    let (st, v) = call(app(), "POST", "/sweep", Some(json!({"neuron": 1, "magnitudes": grid, "sample": "5", "class": 1}))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["magnitudes"], json!(grid));
    let p = v["probabilities"].as_array().unwrap();
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));

    let clf = json!({"kind": "linear", "weights": vec![0.1; 8], "bias": 0.0});
    let (st, v) = call(app(), "POST", "/sweep", Some(json!({"neuron": 1, "magnitudes": grid, "sample": "5", "classifier": clf}))).await;
    assert_eq!(st, StatusCode::OK, "{v}");
    assert_eq!(v["probabilities"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn error_statuses() {
    let cases: Vec<(&str, &str, Option<String>, StatusCode)> = vec![
        ("POST", "/search", Some("{not json".into()), StatusCode::BAD_REQUEST),
        ("POST", "/search", Some(r#"{"query_id": "1", "extra": 1}"#.into()), StatusCode::BAD_REQUEST),
        ("POST", "/search", Some(r#"{"query_id": "1", "vector": [1.0]}"#.into()), StatusCode::BAD_REQUEST),
        ("POST", "/search", Some(r#"{"query_id": "1", "space": "nowhere"}"#.into()), StatusCode::BAD_REQUEST),
        ("POST", "/search", Some(r#"{"query_id": "nope"}"#.into()), StatusCode::NOT_FOUND),
        ("POST", "/search", Some(r#"{"vector": [1.0, 2.0]}"#.into()), StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/manipulate", Some(r#"{"sample": "1", "edits": [{"neuron": 32, "magnitude": 1}]}"#.into()), StatusCode::NOT_FOUND),
        ("POST", "/manipulate", Some(r#"{"vector": [0.0]}"#.into()), StatusCode::UNPROCESSABLE_ENTITY),
        ("POST", "/manipulate", Some(r#"{"sample": "1", "edits": [{"neuron": 1, "magnitude": -1}]}"#.into()), StatusCode::BAD_REQUEST),
        ("POST", "/sweep", Some(r#"{"neuron": 99, "magnitudes": [1], "sample": "1"}"#.into()), StatusCode::NOT_FOUND),
        ("POST", "/sweep", Some(r#"{"magnitudes": [1], "sample": "1"}"#.into()), StatusCode::BAD_REQUEST),
        ("POST", "/sweep", Some(r#"{"neuron": 1, "magnitudes": [2, 1], "sample": "1"}"#.into()), StatusCode::BAD_REQUEST),
        ("GET", "/nowhere", None, StatusCode::NOT_FOUND),
    ];
    for (method, uri, body, want) in cases {
        let (st, v) = call_raw(app(), method, uri, body.clone()).await;
        assert_eq!(st, want, "{method} {uri} {body:?}: {v}");
        if uri != "/nowhere" {
            assert!(v["error"].is_string(), "{uri}: {v}");
        }
    }
}

#[tokio::test]
async fn spec_lists_routes() {
    let (st, v) = call(app(), "GET", "/spec", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(v, openapi_document());
    for path in ["/health", "/concepts", "/samples/{id}/activations", "/search", "/manipulate", "/sweep"] {
        assert!(v["paths"].get(path).is_some(), "{path}");
    }
}

#[tokio::test]
async fn cors_allowlist() {
    let app = router(world().state.clone(), &["http://localhost:5173".to_string()]).unwrap();
    let req = Request::builder()
        .uri("/health")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
    let req = Request::builder().uri("/health").header("origin", "http://evil.example").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert!(resp.headers().get("access-control-allow-origin").is_none());
    assert!(router(world().state.clone(), &["not a header\n".to_string()]).is_err());
}

fn request_mix() -> Vec<(&'static str, String, Option<Value>)> {
    let mut out = Vec::new();
    for i in 0..12 {
        let id = (i * 31 % 400).to_string();
        out.push(("GET", format!("/samples/{id}/activations?top=5"), None));
        out.push(("POST", "/search".into(), Some(json!({"query_id": id, "space": if i % 2 == 0 { "embedding" } else { "activation" }, "t": 7}))));
        out.push((
            "POST",
            "/manipulate".into(),
            Some(json!({"sample": id, "edits": [{"neuron": i % 32, "magnitude": i as f64}], "search": 4})),
        ));
        out.push(("POST", "/sweep".into(), Some(json!({"neuron": i % 32, "magnitudes": [0.3, 20.0, 30.0], "sample": id}))));
        out.push(("POST", "/search".into(), Some(json!({"query_id": "missing"}))));
    }
    out.push(("GET", "/concepts".into(), None));
    out.push(("GET", "/health".into(), None));
    out
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_sequential_answers() {
    let mix = request_mix();
    let mut expected = Vec::new();
    for (m, uri, body) in &mix {
        expected.push(call(app(), m, uri, body.clone()).await);
    }
    // Idempotent: a second sequential pass gives identical bodies.
    for ((m, uri, body), want) in mix.iter().zip(&expected) {
        assert_eq!(&call(app(), m, uri, body.clone()).await, want, "{uri}");
    }
    // Interleave several shuffled copies of the mix.
    let mut handles = Vec::new();
    for round in 0..4usize {
        for j in 0..mix.len() {
            let i = (j * 7 + round * 13) % mix.len();
            let (m, uri, body) = mix[i].clone();
            let want = expected[i].clone();
            handles.push(tokio::spawn(async move {
                let got = call(app(), m, &uri, body).await;
                assert_eq!(got, want, "{m} {uri}");
            }));
        }
    }
    for h in handles {
        h.await.unwrap();
    }
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut out = String::new();
    s.read_to_string(&mut out).ok()?;
    Some(out)
}

#[test]
fn serve_subcommand_listens_on_port() {
    let dir = tempfile::tempdir().unwrap();
    let emb = dir.path().join("d.emb");
    let model = dir.path().join("m.sae");
    let bin = env!("CARGO_BIN_EXE_msae");
    let run = |args: &[&str]| assert!(Command::new(bin).args(args).output().unwrap().status.success(), "{args:?}");
    run(&["synth", "--n", "6", "--atoms", "8", "--active", "2", "--count", "100", "--out", emb.to_str().unwrap()]);
    run(&[
        "train", "--embeddings", emb.to_str().unwrap(), "--arch", "topk", "--k", "2", "--latents", "12", "--epochs", "1",
        "--out", model.to_str().unwrap(),
    ]);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let child = Command::new(bin)
        .args(["serve", "--model", model.to_str().unwrap(), "--embeddings", emb.to_str().unwrap(), "--port", &port.to_string()])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let _server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        if let Some(resp) = http_get(port, "/health") {
            assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
            assert!(resp.contains("\"status\":\"ok\""), "{resp}");
            break;
        }
        assert!(Instant::now() < deadline, "server did not come up");
        std::thread::sleep(Duration::from_millis(50));
    }
}
