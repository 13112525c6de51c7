use std::sync::Arc;
use std::time::Duration;

use it2i_core::backends::{BackendSpec, Capability};
use it2i_core::config::ServiceConfig;
use it2i_core::engine::{EngineError, Orchestrator, TurnEvent};
use it2i_core::llm::{EchoLlm, FnLlm, LlmClient, LlmError, ScriptedLlm};
use it2i_core::router::GenerationKind;
use it2i_core::session::{ImageStatus, Role, Segment, SessionStore};
use it2i_testkit::SdStub;

fn engine_with(dir: &std::path::Path, config: ServiceConfig, chat: Arc<dyn LlmClient>) -> Orchestrator {
    let store = Arc::new(SessionStore::open(dir).unwrap());
    Orchestrator::new(store, config, chat, Arc::new(EchoLlm))
}

fn plain_config() -> ServiceConfig {
    let mut config = ServiceConfig::default();
    config.refine.enabled = false;
    config
}

fn text_of(events: &[TurnEvent]) -> String {
    events
        .iter()
        .filter_map(|e| match e {
            TurnEvent::TextDelta { delta, .. } => Some(delta.as_str()),
            _ => None,
        })
        .collect()
}

fn names(events: &[TurnEvent]) -> Vec<&'static str> {
    events.iter().map(TurnEvent::name).collect()
}

fn dedup_names(events: &[TurnEvent]) -> Vec<&'static str> {
    let mut n = names(events);
    n.dedup();
    n
}

#[tokio::test]
async fn first_hedgehog_turn() {
    let dir = tempfile::tempdir().unwrap();
    let chat = Arc::new(ScriptedLlm::new([
        "It might looks like as <image> a super-duper sunflower hedgehog </image>",
    ]));
    let engine = engine_with(dir.path(), plain_config(), chat.clone());
    let sid = engine.create_session().unwrap().session_id;
    let events = engine
        .run_turn(&sid, "What does a super-duper sunflower hedgehog look like ?")
        .unwrap()
        .collect()
        .await;
    assert_eq!(
        dedup_names(&events),
        ["text_delta", "image_pending", "image_ready", "turn_completed"]
    );
    assert_eq!(text_of(&events), "It might looks like as ");

    let session = engine.store().get(&sid).unwrap();
    assert_eq!(session.messages.len(), 2);
    let image = &session.images[0];
    assert_eq!(image.status, ImageStatus::Ready);
    assert_eq!(image.kind, GenerationKind::New);
    assert_eq!(image.description, "a super-duper sunflower hedgehog");
    assert_eq!(
        session.messages[1].segments,
        vec![
            Segment::Text("It might looks like as ".into()),
            Segment::Image(image.image_id.clone())
        ]
    );
    let bytes = engine.image_bytes(&image.image_id).unwrap().unwrap();
    assert_eq!(&bytes[1..4], b"PNG");

    // the system prompt and the user text reached the LLM
    let context = &chat.seen()[0];
    assert!(context[0].content.starts_with("You are Mini-DALLE3"));
    assert_eq!(context.last().unwrap().content, "What does a super-duper sunflower hedgehog look like ?");
}

#[tokio::test]
async fn pure_text_turn_has_no_images() {
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(
        dir.path(),
        plain_config(),
        Arc::new(ScriptedLlm::new(["Hedgehogs eat insects."])),
    );
    let sid = engine.create_session().unwrap().session_id;
    let events = engine.run_turn(&sid, "what do hedgehogs eat?").unwrap().collect().await;
    assert_eq!(dedup_names(&events), ["text_delta", "turn_completed"]);
    assert!(engine.store().get(&sid).unwrap().images.is_empty());
}

#[tokio::test]
async fn two_tags_are_two_roots() {
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(
        dir.path(),
        plain_config(),
        Arc::new(ScriptedLlm::new(["Sure, <image> a cute dog </image> and <image> a cute cat </image>"])),
    );
    let sid = engine.create_session().unwrap().session_id;
    let events = engine.run_turn(&sid, "a dog and a cat").unwrap().collect().await;
    let ready: Vec<_> = events
        .iter()
        .filter_map(|e| match e {
            TurnEvent::ImageReady { parent_id, .. } => Some(parent_id.clone()),
            _ => None,
        })
        .collect();
    assert_eq!(ready, vec![None, None]);
    let session = engine.store().get(&sid).unwrap();
    assert_ne!(session.images[0].content_digest, session.images[1].content_digest);
    assert_eq!(session.focus, Some(session.images[1].image_id.clone()));
}

#[tokio::test]
async fn generation_starts_before_the_stream_ends() {
    let dir = tempfile::tempdir().unwrap();
    let chat = ScriptedLlm::new(["Look: <image> a red kite </image> and that is all I have to say about kites."])
        .with_chunking(4, Duration::from_millis(20));
    let mut config = plain_config();
    config.backends[0].default_size = (64, 64);
    let engine = engine_with(dir.path(), config, Arc::new(chat));
    let sid = engine.create_session().unwrap().session_id;
    let events = engine.run_turn(&sid, "kite").unwrap().collect().await;
    let first_pending = events.iter().position(|e| e.name() == "image_pending").unwrap();
    let first_ready = events.iter().position(|e| e.name() == "image_ready").unwrap();
    let last_text = events.iter().rposition(|e| e.name() == "text_delta").unwrap();
    assert!(first_pending < last_text);
    assert!(first_ready < last_text, "rendering should overlap with streaming: {:?}", names(&events));
    assert_eq!(events.last().unwrap().name(), "turn_completed");
}

#[tokio::test]
async fn one_turn_at_a_time() {
    let dir = tempfile::tempdir().unwrap();
    let chat = ScriptedLlm::new(["slow reply here", "second"]).with_chunking(2, Duration::from_millis(20));
    let engine = engine_with(dir.path(), plain_config(), Arc::new(chat));
    let sid = engine.create_session().unwrap().session_id;
    let first = engine.run_turn(&sid, "one").unwrap();
    assert!(matches!(engine.run_turn(&sid, "two"), Err(EngineError::TurnInFlight(_))));
    first.collect().await;
    // the guard is released once the task ends
    tokio::time::sleep(Duration::from_millis(20)).await;
    let events = engine.run_turn(&sid, "two").unwrap().collect().await;
    assert_eq!(text_of(&events), "second");
}

#[tokio::test]
async fn unknown_session_and_empty_text() {
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(dir.path(), plain_config(), Arc::new(EchoLlm));
    let ghost = it2i_core::session::SessionId::parse("ghost").unwrap();
    assert!(matches!(engine.run_turn(&ghost, "hi"), Err(EngineError::NotFound(_))));
    let sid = engine.create_session().unwrap().session_id;
    assert!(matches!(engine.run_turn(&sid, "  "), Err(EngineError::EmptyMessage)));
}

#[tokio::test]
async fn llm_failure_ends_the_turn_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(dir.path(), plain_config(), Arc::new(FnLlm::failing(LlmError::Timeout)));
    let sid = engine.create_session().unwrap().session_id;
    let events = engine.run_turn(&sid, "hi").unwrap().collect().await;
    assert_eq!(names(&events), ["error", "turn_completed"]);
    assert!(matches!(&events[0], TurnEvent::Error { code, .. } if code == "llm_timeout"));
    let session = engine.store().get(&sid).unwrap();
    assert_eq!(session.messages.len(), 2);
    assert_eq!(session.messages[1].role, Role::Assistant);
}

#[tokio::test]
async fn backend_failure_fails_only_that_image() {
    let stub = SdStub::start(it2i_testkit::solid_png(32, 32, [1, 1, 1])).await;
    stub.fail_with(500);
    let mut config = plain_config();
    let mut sd = BackendSpec::sd_http("sd", &stub.base_url(), &[Capability::Txt2Img]);
    sd.default_size = (32, 32);
    config.backends = vec![sd];
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(
        dir.path(),
        config,
        Arc::new(ScriptedLlm::new(["a <image> x </image> b <edit> x, blue </edit> c"])),
    );
    let sid = engine.create_session().unwrap().session_id;
    let events = engine.run_turn(&sid, "go").unwrap().collect().await;
    let failed: Vec<_> = events
        .iter()
        .filter_map(|e| match e {
            TurnEvent::ImageFailed { code, .. } => Some(code.as_str()),
            _ => None,
        })
        .collect();
    assert_eq!(failed, ["backend_http_error", "parent_unavailable"]);
    assert_eq!(text_of(&events), "a  b  c");
    assert_eq!(events.last().unwrap().name(), "turn_completed");
    let session = engine.store().get(&sid).unwrap();
    assert!(session.images.iter().all(|i| i.status == ImageStatus::Failed));
}

#[tokio::test]
async fn capability_fallback_is_noted() {
    let stub = SdStub::start(it2i_testkit::solid_png(32, 32, [1, 1, 1])).await;
    let mut config = plain_config();
    let mut sd = BackendSpec::sd_http("sd", &stub.base_url(), &[Capability::Txt2Img]);
    sd.default_size = (32, 32);
    config.backends = vec![sd];
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(
        dir.path(),
        config,
        Arc::new(ScriptedLlm::new(["<image> a boat </image><edit> a castle of ice </edit>"])),
    );
    let sid = engine.create_session().unwrap().session_id;
    engine.run_turn(&sid, "go").unwrap().collect().await;
    let session = engine.store().get(&sid).unwrap();
    let edit = &session.images[1];
    assert_eq!(edit.status, ImageStatus::Ready);
    assert!(edit.notes.iter().any(|n| n.contains("image-prompt")), "{:?}", edit.notes);
    let requests = stub.requests();
    assert_eq!(requests[1].0, "/sdapi/v1/img2img");
    assert_eq!(requests[1].1["denoising_strength"], 0.75);
}

#[tokio::test]
async fn transcript_matches_log_replay() {
    let dir = tempfile::tempdir().unwrap();
    let engine = engine_with(
        dir.path(),
        plain_config(),
        Arc::new(ScriptedLlm::new([
            "Sure, <image> a cute dog </image>",
            "Here, <edit> a cute dog wearing a hat </edit>",
            "Dogs like hats.",
        ])),
    );
    let sid = engine.create_session().unwrap().session_id;
    for text in ["dog", "with a hat", "why?"] {
        engine.run_turn(&sid, text).unwrap().collect().await;
    }
    let live = engine.store().get(&sid).unwrap();
    let replayed = SessionStore::open(dir.path()).unwrap().load_session(&sid).unwrap();
    assert_eq!(live, replayed);
    assert_eq!(replayed.messages.len(), 6);
    assert_eq!(replayed.images[1].parent_id, Some(replayed.images[0].image_id.clone()));
    assert_eq!(replayed.images[1].seed, replayed.images[0].seed);
}

#[tokio::test]
async fn refinement_reaches_the_backend_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(SessionStore::open(dir.path()).unwrap());
    let refiner = FnLlm::constant("a cute dog on a sunny lawn, soft light");
    let engine = Orchestrator::new(
        store,
        ServiceConfig::default(),
        Arc::new(ScriptedLlm::new(["<image> a cute dog </image>"])),
        Arc::new(refiner),
    );
    let sid = engine.create_session().unwrap().session_id;
    engine.run_turn(&sid, "dog").unwrap().collect().await;
    let image = &engine.store().get(&sid).unwrap().images[0];
    assert_eq!(image.refined_prompt, "a cute dog on a sunny lawn, soft light");
    assert_eq!(image.description, "a cute dog");
}

#[tokio::test]
async fn llm_context_replays_history() {
    let dir = tempfile::tempdir().unwrap();
    let chat = Arc::new(ScriptedLlm::new(["Sure, <image> a cute dog </image>", "ok"]));
    let engine = engine_with(dir.path(), plain_config(), chat.clone());
    let sid = engine.create_session().unwrap().session_id;
    engine.run_turn(&sid, "can you generate a dog ?").unwrap().collect().await;
    engine.run_turn(&sid, "thanks").unwrap().collect().await;
    let second = &chat.seen()[1];
    let tail: Vec<&str> = second[1..].iter().map(|m| m.content.as_str()).collect();
    assert_eq!(tail, ["can you generate a dog ?", "Sure, <image> a cute dog </image>", "thanks"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn next_turn_is_accepted_once_events_end() {
    let dir = tempfile::tempdir().unwrap();
    let chat = Arc::new(FnLlm::constant("ok"));
    let engine = engine_with(dir.path(), plain_config(), chat);
    let sid = engine.create_session().unwrap().session_id;
    for i in 0..50 {
        let events = engine.run_turn(&sid, &format!("turn {i}")).unwrap().collect().await;
        assert_eq!(names(&events).last(), Some(&"turn_completed"));
        assert!(!engine.is_turn_running(&sid));
    }
}
