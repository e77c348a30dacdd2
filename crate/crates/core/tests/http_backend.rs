use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::{json, Value};

use air_core::backend::http::{HttpClient, HttpEmbedder, HttpRewriter, HttpTextToImage};
use air_core::backend::mock::{MockRewriter, MockTextToImage};
use air_core::backend::{generate_image, BackendConfig, BackendKind, Embedder, Rewriter, TextToImage};
use air_core::model::{PromptRecord, PromptSource};
use air_core::prompt::{parse_prompt, RewriteRequest};
use air_core::Error;

#[derive(Default)]
struct Stats {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    authorized: AtomicUsize,
}

fn track(stats: &Stats, headers: &HeaderMap) {
    stats.calls.fetch_add(1, Ordering::SeqCst);
    if headers.get("authorization").and_then(|v| v.to_str().ok()) == Some("Bearer s3cret") {
        stats.authorized.fetch_add(1, Ordering::SeqCst);
    }
}

async fn t2i(State(stats): State<Arc<Stats>>, headers: HeaderMap, Json(body): Json<Value>) -> Json<Value> {
    track(&stats, &headers);
    let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    tokio::time::sleep(Duration::from_millis(30)).await;
    stats.in_flight.fetch_sub(1, Ordering::SeqCst);
    let prompt = PromptRecord {
        id: "p".into(),
        terms: parse_prompt(body["prompt"].as_str().unwrap()).unwrap(),
        source: PromptSource::Engineered,
        combination: None,
        class_label: "normal".into(),
    };
    let bytes = MockTextToImage
        .generate(&prompt, body["seed"].as_u64().unwrap(), body["size"].as_u64().unwrap() as u32)
        .unwrap();
    Json(json!({ "image_b64": B64.encode(bytes) }))
}

async fn embed(State(stats): State<Arc<Stats>>, headers: HeaderMap) -> Json<Value> {
    track(&stats, &headers);
    let mut v = vec![0.0f32; 512];
    v[0] = 3.0;
    v[1] = 4.0;
    Json(json!({ "embedding": v }))
}

async fn short_embed(State(stats): State<Arc<Stats>>, headers: HeaderMap) -> Json<Value> {
    track(&stats, &headers);
    Json(json!({ "embedding": vec![1.0f32; 511] }))
}

async fn fail(State(stats): State<Arc<Stats>>, headers: HeaderMap) -> (StatusCode, &'static str) {
    track(&stats, &headers);
    (StatusCode::INTERNAL_SERVER_ERROR, "model server exploded")
}

async fn slow(State(stats): State<Arc<Stats>>, headers: HeaderMap) -> Json<Value> {
    track(&stats, &headers);
    tokio::time::sleep(Duration::from_secs(2)).await;
    Json(json!({ "text": "late" }))
}

async fn garbage(State(stats): State<Arc<Stats>>, headers: HeaderMap) -> &'static str {
    track(&stats, &headers);
    "not json"
}

async fn rewrite(State(stats): State<Arc<Stats>>, headers: HeaderMap, Json(body): Json<Value>) -> Json<Value> {
    track(&stats, &headers);
    assert_eq!(body["template_id"], "air-v1");
    assert!(body["prompt"].as_str().unwrap().contains("small fire and smoke"));
    Json(json!({ "text": "A captivating drone's view of a boreal forest, (small fire and smoke:1.4), 4K UHD image" }))
}

struct Server {
    addr: SocketAddr,
    stats: Arc<Stats>,
    _rt: tokio::runtime::Runtime,
}

impl Server {
    fn start() -> Self {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
        let stats = Arc::new(Stats::default());
        let app = Router::new()
            .route("/t2i", post(t2i))
            .route("/embed", post(embed))
            .route("/short", post(short_embed))
            .route("/fail", post(fail))
            .route("/slow", post(slow))
            .route("/garbage", post(garbage))
            .route("/rewrite", post(rewrite))
            .with_state(Arc::clone(&stats));
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
        let addr = listener.local_addr().unwrap();
        rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
        Server { addr, stats, _rt: rt }
    }

    fn config(&self, kind: BackendKind, path: &str) -> BackendConfig {
        BackendConfig {
            auth_token: Some("s3cret".into()),
            timeout_secs: 5.0,
            ..BackendConfig::http(kind, format!("http://{}{path}", self.addr))
        }
    }
}

fn prompt() -> PromptRecord {
    PromptRecord {
        id: "p".into(),
        terms: parse_prompt("A captivating photo, (normal:1.4), 4K UHD image").unwrap(),
        source: PromptSource::Engineered,
        combination: None,
        class_label: "normal".into(),
    }
}

#[test]
fn http_generation_matches_mock_and_sends_token() {
    let server = Server::start();
    let client = HttpTextToImage(HttpClient::new(&server.config(BackendKind::TextToImage, "/t2i")).unwrap());
    let bytes = generate_image(&client, &prompt(), 9, 256).unwrap();
    let expected = MockTextToImage.generate(&prompt(), 9, 256).unwrap();
    assert!(bytes == expected, "http bytes differ from mock");
    assert_eq!(server.stats.authorized.load(Ordering::SeqCst), 1);
    assert!(client.identifier().starts_with("http:"));
}

#[test]
fn max_parallel_bounds_in_flight_requests() {
    let server = Server::start();
    let cfg = BackendConfig {
        max_parallel: 2,
        ..server.config(BackendKind::TextToImage, "/t2i")
    };
    let client = Arc::new(HttpTextToImage(HttpClient::new(&cfg).unwrap()));
    std::thread::scope(|s| {
        for seed in 0..8 {
            let client = Arc::clone(&client);
            s.spawn(move || client.generate(&prompt(), seed, 256).unwrap());
        }
    });
    assert_eq!(server.stats.calls.load(Ordering::SeqCst), 8);
    assert!(server.stats.max_in_flight.load(Ordering::SeqCst) <= 2);
}

#[test]
fn server_error_is_not_retried() {
    let server = Server::start();
    let client = HttpEmbedder(HttpClient::new(&server.config(BackendKind::Embedder, "/fail")).unwrap());
    match client.embed(b"png") {
        Err(Error::Backend { status, message, .. }) => {
            assert_eq!(status, Some(500));
            assert!(message.contains("exploded"));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(server.stats.calls.load(Ordering::SeqCst), 1);
}

#[test]
fn timeout_is_retried_once() {
    let server = Server::start();
    let cfg = BackendConfig {
        timeout_secs: 0.3,
        ..server.config(BackendKind::Rewriter, "/slow")
    };
    let client = HttpRewriter(HttpClient::new(&cfg).unwrap());
    let request = RewriteRequest::new(air_core::prompt::enumerate_combinations(&grammar()).unwrap()[0].clone());
    assert!(matches!(client.rewrite(&request), Err(Error::Backend { status: None, .. })));
    assert_eq!(server.stats.calls.load(Ordering::SeqCst), 2);
}

#[test]
fn malformed_payload_is_a_backend_error() {
    let server = Server::start();
    let client = HttpEmbedder(HttpClient::new(&server.config(BackendKind::Embedder, "/garbage")).unwrap());
    let err = client.embed(b"png").unwrap_err();
    assert!(err.to_string().contains("malformed"), "{err}");
}

#[test]
fn embeddings_are_renormalised_and_dimension_checked() {
    let server = Server::start();
    let client = HttpEmbedder(HttpClient::new(&server.config(BackendKind::Embedder, "/embed")).unwrap());
    let e = client.embed(b"png").unwrap();
    assert!((e.values()[0] - 0.6).abs() < 1e-7 && (e.values()[1] - 0.8).abs() < 1e-7);
    let short = HttpEmbedder(HttpClient::new(&server.config(BackendKind::Embedder, "/short")).unwrap());
    assert!(short.embed(b"png").is_err());
}

fn grammar() -> air_core::model::ContextGrammar {
    use air_core::model::{Context, ContextGrammar};
    ContextGrammar::new(vec![
        Context::new("category", &["small fire and smoke"]),
        Context::new("location", &["boreal forest"]),
        Context::new("view", &["drone's view"]),
    ])
    .unwrap()
}

#[test]
fn http_rewriter_feeds_prompt_engineering() {
    let server = Server::start();
    let client = HttpRewriter(HttpClient::new(&server.config(BackendKind::Rewriter, "/rewrite")).unwrap());
    let request = RewriteRequest::new(air_core::prompt::enumerate_combinations(&grammar()).unwrap()[0].clone());
    let record = air_core::prompt::engineer_prompt(&request, &client).unwrap();
    assert_eq!(record.source, PromptSource::Engineered);
    assert_eq!(record.terms[1].weight.value(), 1.4);
    let mock = MockRewriter.rewrite(&request).unwrap();
    assert!(mock.contains("(small fire and smoke:1.4)"));
}
