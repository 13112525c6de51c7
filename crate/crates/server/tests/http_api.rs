mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{start, SseReader};
use it2i_core::backends::BackendSpec;
use it2i_core::config::ServiceConfig;
use it2i_core::engine::Orchestrator;
use it2i_core::llm::{EchoLlm, ScriptedLlm};
use it2i_core::session::SessionStore;
use serde_json::{json, Value};

fn engine(dir: &std::path::Path, llm: ScriptedLlm) -> Orchestrator {
    let mut mock = BackendSpec::mock("mock");
    mock.default_size = (64, 64);
    let config = ServiceConfig {
        data_dir: dir.to_path_buf(),
        backends: vec![mock],
        ..Default::default()
    };
    let store = Arc::new(SessionStore::open(dir).unwrap());
    Orchestrator::new(store, config, Arc::new(llm), Arc::new(EchoLlm))
}

async fn new_session(http: &reqwest::Client, base: &str) -> String {
    let response = http.post(format!("{base}/v1/sessions")).send().await.unwrap();
    assert_eq!(response.status(), 201);
    let body: Value = response.json().await.unwrap();
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn sessions_are_created_and_listed() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(engine(dir.path(), ScriptedLlm::new(Vec::<String>::new()))).await;
    let http = reqwest::Client::new();
    let sid = new_session(&http, &base).await;

    let list: Vec<String> = http.get(format!("{base}/v1/sessions")).send().await.unwrap().json().await.unwrap();
    assert_eq!(list, vec![sid.clone()]);

    let transcript: Value = http.get(format!("{base}/v1/sessions/{sid}")).send().await.unwrap().json().await.unwrap();
    assert_eq!(transcript["session_id"], sid);
    assert_eq!(transcript["messages"], json!([]));

    let missing = http.get(format!("{base}/v1/sessions/nope")).send().await.unwrap();
    assert_eq!(missing.status(), 404);
    let missing = http.get(format!("{base}/v1/sessions/nope/events")).send().await.unwrap();
    assert_eq!(missing.status(), 404);
}

#[tokio::test]
async fn unknown_images_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(engine(dir.path(), ScriptedLlm::new(Vec::<String>::new()))).await;
    let http = reqwest::Client::new();
    let sid = new_session(&http, &base).await;
    for id in ["unknown".to_string(), format!("{sid}-i1"), "ghost-i1".to_string()] {
        let response = http.get(format!("{base}/v1/images/{id}")).send().await.unwrap();
        assert_eq!(response.status(), 404, "{id}");
    }
}

#[tokio::test]
async fn bad_messages_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = start(engine(dir.path(), ScriptedLlm::new(Vec::<String>::new()))).await;
    let http = reqwest::Client::new();
    let sid = new_session(&http, &base).await;

    let ghost = http
        .post(format!("{base}/v1/sessions/ghost/messages"))
        .json(&json!({"text": "hi"}))
        .send()
        .await
        .unwrap();
    assert_eq!(ghost.status(), 404);

    let url = format!("{base}/v1/sessions/{sid}/messages");
    let cases = [
        ("{not json".to_string(), "application/json"),
        (r#"{"words": "hi"}"#.to_string(), "application/json"),
        (r#"{"text": "hi"}"#.to_string(), "text/plain"),
        (r#"{"text": "   "}"#.to_string(), "application/json"),
    ];
    for (body, content_type) in cases {
        let response = http
            .post(&url)
            .header("content-type", content_type)
            .body(body.clone())
            .send()
            .await
            .unwrap();
        assert_eq!(response.status(), 400, "{body}");
        let error: Value = response.json().await.unwrap();
        assert!(error["error"]["code"].is_string());
    }
}

#[tokio::test]
async fn full_turn_over_http_matches_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let llm = ScriptedLlm::new(["Here: <image> a cute dog </image> and <image> a cute cat </image> done."])
        .with_chunking(6, Duration::from_millis(2));
    let base = start(engine(dir.path(), llm)).await;
    let http = reqwest::Client::new();
    let sid = new_session(&http, &base).await;

    let mut first = SseReader::connect(&format!("{base}/v1/sessions/{sid}/events")).await;
    let mut second = SseReader::connect(&format!("{base}/v1/sessions/{sid}/events")).await;
    let accepted = http
        .post(format!("{base}/v1/sessions/{sid}/messages"))
        .json(&json!({"text": "show me a dog and a cat"}))
        .send()
        .await
        .unwrap();
    assert_eq!(accepted.status(), 202);
    let accepted: Value = accepted.json().await.unwrap();
    assert_eq!(accepted["message_id"], format!("{sid}-m1"));

    let a = first.turn().await;
    let b = second.turn().await;
    assert_eq!(a, b);
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names.iter().filter(|n| **n == "image_ready").count(), 2);
    assert_eq!(names.last(), Some(&"turn_completed"));
    for (name, data) in &a {
        assert_eq!(data["type"], name.as_str());
    }

    let transcript: Value = http.get(format!("{base}/v1/sessions/{sid}")).send().await.unwrap().json().await.unwrap();
    let replayed = SessionStore::open(dir.path())
        .unwrap()
        .load_session(&it2i_core::session::SessionId::parse(&sid).unwrap())
        .unwrap();
    assert_eq!(transcript, serde_json::to_value(&replayed).unwrap());
    assert_eq!(replayed.images.len(), 2);
    assert!(replayed.images.iter().all(|i| i.parent_id.is_none()));

    for (_, ready) in a.iter().filter(|(n, _)| n == "image_ready") {
        let url = format!("{base}{}", ready["url"].as_str().unwrap());
        let response = http.get(url).send().await.unwrap();
        assert_eq!(response.status(), 200);
        assert_eq!(response.headers()["content-type"], "image/png");
        let bytes = response.bytes().await.unwrap();
        assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    }
}

#[tokio::test]
async fn one_turn_at_a_time_per_session() {
    let dir = tempfile::tempdir().unwrap();
    let llm = ScriptedLlm::new(["a slow reply that takes a little while", "second"])
        .with_chunking(1, Duration::from_millis(10));
    let base = start(engine(dir.path(), llm)).await;
    let http = reqwest::Client::new();
    let sid = new_session(&http, &base).await;
    let url = format!("{base}/v1/sessions/{sid}/messages");

    let mut events = SseReader::connect(&format!("{base}/v1/sessions/{sid}/events")).await;
    let first = http.post(&url).json(&json!({"text": "one"})).send().await.unwrap();
    assert_eq!(first.status(), 202);
    let busy = http.post(&url).json(&json!({"text": "two"})).send().await.unwrap();
    assert_eq!(busy.status(), 409);
    let body: Value = busy.json().await.unwrap();
    assert_eq!(body["error"]["code"], "turn_in_flight");

    events.turn().await;
    // the in-flight marker clears when the turn task ends
    let mut status = 409;
    for _ in 0..50 {
        status = http.post(&url).json(&json!({"text": "two"})).send().await.unwrap().status().as_u16();
        if status != 409 {
            break;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    assert_eq!(status, 202);
}
